"""Command-line front end: ``meterleak solve | simulate | sweep``.

Exit codes: 0 success, 2 usage, 3 invalid input or configuration,
4 solver non-convergence, 5 file I/O.  Without ``--out`` results go to
``$METERLEAK_OUTPUT_DIR/<command>.<ext>`` when that variable is set, and
are only printed otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .binary import SWEEP_COLUMNS, figure4_sweep, parse_grid
from .core import INF, FiniteDistribution, PolicyKernel
from .errors import (
    ConfigurationError,
    MeterLeakError,
    NonConvergenceError,
    ResultIOError,
    TraceFormatError,
    ValidationError,
)
from .privacy_power import solve_privacy_power
from .simulation import SystemConfig, run_best_effort, run_store_and_hide, run_zero_battery
from .traceio import ResultRecord, load_trace_csv, write_json, write_results, write_table
from .zero_battery import solve_I0_emu, solve_I0_up

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NONCONVERGENCE = 4
EXIT_IO = 5

OUTPUT_DIR_ENV = "METERLEAK_OUTPUT_DIR"

log = logging.getLogger("meterleak")


class UsageError(MeterLeakError):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _energy(text):
    if text.strip().lower() in ("inf", "infinity"):
        return INF
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number or 'inf'") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _fmt(v):
    return "inf" if v == INF else f"{v:.6f}"


def _plain(v):
    """JSON-friendly scenario value."""
    return "inf" if v == INF else v


# ---------------------------------------------------------------------------
# distribution arguments


def _add_load_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--qx", type=float, help="Pr{X=1} for a binary load")
    g.add_argument("--px-file", help="JSON pmf file {\"levels\": [...], \"mass\": [...]}")
    g.add_argument("--px-trace", help="timestamp,load CSV trace to estimate p_X from")
    p.add_argument("--step", type=float, default=1.0, help="quantization step for --px-trace")
    p.add_argument("--max-level", type=int, default=None, help="clip level for --px-trace")


def _add_harvest_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pe", type=float, help="Pr{E=1} for a binary harvest")
    g.add_argument("--pe-file", help="JSON pmf file for the harvest")


def _read_pmf(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return FiniteDistribution.from_dict(json.load(fh))
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: not a pmf file ({exc})") from exc


def _load_dist(args):
    if args.qx is not None:
        return FiniteDistribution.bernoulli(args.qx), {"q_x": args.qx}
    if args.px_file:
        d = _read_pmf(args.px_file)
        return d, {"px_file": args.px_file, "p_x": d.to_dict()}
    if args.px_trace:
        d = load_trace_csv(args.px_trace, args.step, args.max_level)
        return d, {"px_trace": args.px_trace, "step": args.step, "p_x": d.to_dict()}
    raise UsageError("one of --qx, --px-file, --px-trace is required")


def _harvest_dist(args, required=True):
    if args.pe is not None:
        return FiniteDistribution.bernoulli(args.pe), {"p_e": args.pe}
    if args.pe_file:
        d = _read_pmf(args.pe_file)
        return d, {"pe_file": args.pe_file, "p_e_dist": d.to_dict()}
    if required:
        raise UsageError("one of --pe, --pe-file is required")
    return None, {}


# ---------------------------------------------------------------------------
# output


def _output_path(args, command, ext):
    if args.out:
        return Path(args.out)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base:
        Path(base).mkdir(parents=True, exist_ok=True)
        return Path(base) / f"{command}.{ext}"
    return None


def _stamp(args):
    if getattr(args, "stamp", False):
        return datetime.now(timezone.utc).isoformat(timespec="seconds")
    return None


def _persist(record, path, fmt):
    if path is not None:
        write_results([record], path, fmt)
        log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> ResultRecord:
    p_x, scenario = _load_dist(args)
    scenario = {"regime": args.regime, **scenario}
    if args.regime == "infinite":
        p_e, extra = _harvest_dist(args, required=False)
        scenario.update(extra)
        if args.avg is not None:
            average = args.avg
        elif p_e is not None:
            average = p_e.mean()
        else:
            raise UsageError("--regime infinite needs --avg or a harvest distribution")
        scenario.update(average=average, peak=_plain(args.peak))
        sol = solve_privacy_power(p_x, average, args.peak, args.tol)
        values = {"leakage_bits": sol.value, "achieved_average": sol.achieved_average}
        diagnostics = {"slope": _plain(sol.slope) if sol.slope != -INF else "-inf",
                       "iterations": sol.iterations, "gap": sol.gap}
        kernel = sol.kernel
    else:
        p_e, extra = _harvest_dist(args)
        scenario.update(extra)
        solver = solve_I0_emu if args.regime == "zero-emu" else solve_I0_up
        sol = solver(p_x, p_e, args.tol)
        values = {"leakage_bits": sol.value}
        diagnostics = {"iterations": sol.iterations, "gap": sol.gap, "variant": sol.variant}
        kernel = sol.kernel
    diagnostics["converged"] = sol.converged
    values["kernel"] = kernel.to_dict()
    scenario["tol"] = args.tol
    record = ResultRecord("solve", scenario, values, diagnostics, timestamp=_stamp(args))
    print(_fmt(sol.value))
    _persist(record, _output_path(args, "solve", args.format), args.format)
    return record


def cmd_simulate(args):
    p_x, scenario = _load_dist(args)
    p_e, extra = _harvest_dist(args)
    scenario.update(extra)
    zero = args.policy == "zero"
    b_max = args.bmax if args.bmax is not None else (0 if zero else INF)
    config = SystemConfig(p_x, p_e, b_max=b_max, n=args.n, seed=args.seed,
                          storage_phase=args.storage_phase)

    if args.kernel_file:
        try:
            with open(args.kernel_file, encoding="utf-8") as fh:
                kernel = PolicyKernel.from_dict(json.load(fh))
        except OSError as exc:
            raise ResultIOError(str(exc), path=args.kernel_file) from exc
        source = {"kernel_file": args.kernel_file}
        reference = None
    elif zero:
        sol = solve_I0_emu(p_x, p_e)
        kernel, reference = sol.kernel, sol.value
        source = {"kernel_from_solver": "zero-emu"}
    else:
        average = args.avg if args.avg is not None else 0.9 * p_e.mean()
        sol = solve_privacy_power(p_x, average)
        kernel, reference = sol.kernel, sol.value
        source = {"kernel_from_solver": "infinite", "average": average}

    if zero:
        report = run_zero_battery(config, kernel)
    elif args.policy == "best-effort":
        report = run_best_effort(config, kernel, allow_nonstrict=args.allow_nonstrict)
    else:
        report = run_store_and_hide(config, kernel, allow_nonstrict=args.allow_nonstrict)

    if args.trace_out:
        try:
            report.trace.to_csv(args.trace_out)
        except OSError as exc:
            raise ResultIOError(str(exc), path=args.trace_out) from exc

    values = report.to_dict()
    config_echo = values.pop("config")
    if reference is not None:
        values["solver_leakage"] = reference
    record = ResultRecord(
        "simulate",
        scenario={"policy": args.policy, **scenario, **source, "config": config_echo},
        values=values,
        diagnostics={"kernel": kernel.to_dict()},
        timestamp=_stamp(args),
    )
    print(f"policy            {report.policy}")
    print(f"empirical_leakage {_fmt(report.empirical_leakage)}")
    if report.conditional_leakage is not None:
        print(f"conditional       {_fmt(report.conditional_leakage)}")
    if reference is not None:
        print(f"solver_leakage    {_fmt(reference)}")
    print(f"violations        {report.violation_count} / {report.n}")
    print(f"mean_battery      {_fmt(report.mean_battery)}")
    _persist(record, _output_path(args, "simulate", args.format), args.format)
    return report


def cmd_sweep(args):
    grid = parse_grid(args.pe)
    rows = figure4_sweep(args.qx, grid)
    columns = list(SWEEP_COLUMNS)
    max_dev = None
    if args.cross_check:
        p_x = FiniteDistribution.bernoulli(args.qx)
        max_dev = 0.0
        for row in rows:
            p_e = FiniteDistribution.bernoulli(row["p_e"])
            row["I_inf_solver"] = solve_privacy_power(p_x, row["p_e"]).value
            row["I0_emu_solver"] = solve_I0_emu(p_x, p_e).value
            row["I0_up_solver"] = solve_I0_up(p_x, p_e).value
            for c in ("I_inf", "I0_emu", "I0_up"):
                max_dev = max(max_dev, abs(row[c] - row[c + "_solver"]))
        columns += ["I_inf_solver", "I0_emu_solver", "I0_up_solver"]

    print(",".join(SWEEP_COLUMNS))
    for row in rows:
        print(",".join(_fmt(row[c]) for c in SWEEP_COLUMNS))
    if max_dev is not None:
        print(f"max |analytic - solver| = {max_dev:.3e}")

    path = _output_path(args, "sweep", "csv")
    if path is not None:
        write_table(rows, path, columns)
        meta = {
            "command": "sweep",
            "tool_version": __version__,
            "q_x": args.qx,
            "p_e_grid": args.pe,
            "cross_check": bool(args.cross_check),
            "max_abs_deviation": max_dev,
            "timestamp": _stamp(args),
        }
        write_json(meta, path.with_name(path.name + ".meta.json"))
    return rows, max_dev


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="meterleak", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_out(p, formats=("json", "csv")):
        p.add_argument("--out", help="output file (default: $%s/<command>.<ext>)" % OUTPUT_DIR_ENV)
        if formats:
            p.add_argument("--format", choices=formats, default="json")
        p.add_argument("--stamp", action="store_true", help="record a wall-clock timestamp")

    p = sub.add_parser("solve", help="minimum leakage rate for one scenario")
    p.add_argument("--regime", choices=("infinite", "zero-emu", "zero-up"), required=True)
    _add_load_args(p)
    _add_harvest_args(p)
    p.add_argument("--avg", type=_energy, help="average AES energy per slot (infinite regime)")
    p.add_argument("--peak", type=_energy, default=INF, help="peak AES energy per slot")
    p.add_argument("--tol", type=float, default=1e-11)
    common_out(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="Monte-Carlo run of a battery policy")
    p.add_argument("--policy", choices=("store-and-hide", "best-effort", "zero"), required=True)
    _add_load_args(p)
    _add_harvest_args(p)
    p.add_argument("--avg", type=_energy, help="average AES budget of the solver kernel "
                   "(default 0.9 x mean harvest)")
    k = p.add_mutually_exclusive_group()
    k.add_argument("--kernel-from-solver", action="store_true", default=True,
                   help="solve first and simulate the optimal kernel (default)")
    k.add_argument("--kernel-file", help="JSON kernel file instead of solving")
    p.add_argument("--n", type=_positive_int, default=1_000_000, help="number of slots")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bmax", type=_energy, default=None,
                   help="battery capacity (default inf, or 0 for --policy zero)")
    p.add_argument("--storage-phase", type=int, default=None,
                   help="store-and-hide storage slots (default ceil(sqrt(n)))")
    p.add_argument("--allow-nonstrict", action="store_true",
                   help="warn instead of failing when E[X-Y] >= mean harvest")
    p.add_argument("--trace-out", help="write the per-slot trace as CSV")
    common_out(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="binary leakage curves over a p_e grid")
    p.add_argument("--qx", type=float, default=0.7)
    p.add_argument("--pe", default="0:1:0.05", help="grid start:stop:step (inclusive)")
    p.add_argument("--cross-check", action="store_true",
                   help="also run the numerical solvers at every grid point")
    common_out(p, formats=())
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"meterleak: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergenceError as exc:
        print(f"meterleak: solver did not converge: {exc} "
              f"(iterations={exc.iterations}, gap={exc.gap})", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ResultIOError, OSError) as exc:
        print(f"meterleak: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ConfigurationError, TraceFormatError) as exc:
        print(f"meterleak: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
