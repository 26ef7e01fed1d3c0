"""End-to-end acceptance checks.

Each test prints one ``ACCEPTANCE <n>: PASS|FAIL`` line with the measured
figures and then asserts the same condition.
"""

import csv
import itertools
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from meterleak import cli
from meterleak.binary import BinaryScenario, binary_I_infinity
from meterleak.core import INF, EnergyAlphabet, FiniteDistribution, kernel_information
from meterleak.privacy_power import (
    batch_information,
    brute_force_privacy_power,
    kernel_grid_min,
    solve_fixed_slope,
    solve_peak_only,
    solve_privacy_power,
    support_mask,
)
from meterleak.simulation import SystemConfig, run_best_effort, run_store_and_hide
from meterleak.zero_battery import brute_force_I0, solve_I0_emu, solve_I0_up

TERNARY = FiniteDistribution(EnergyAlphabet.range(2), np.array([0.2, 0.5, 0.3]))


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def _random_dist(rng, size):
    return FiniteDistribution(EnergyAlphabet.range(size - 1), rng.dirichlet(np.ones(size)))


def test_binary_infinite_battery_closed_form(report):
    t0 = time.perf_counter()
    worst = 0.0
    for q in np.round(np.arange(1, 10) * 0.1, 10):
        p_x = FiniteDistribution.bernoulli(q)
        for p_e in np.round(np.arange(21) * 0.05, 10):
            value = solve_privacy_power(p_x, p_e, INF).value
            worst = max(worst, abs(value - binary_I_infinity(BinaryScenario(q, p_e))))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-5 and elapsed < 10.0,
           f"max |solver - closed form| = {worst:.2e} (limit 1e-5), {elapsed:.2f} s (limit 10 s)")


def test_sweep_curves(tmp_path, report):
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--qx", "0.7", "--out", str(out)]) == cli.EXIT_OK
    with open(out, newline="") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    curves = ("I0_up", "I0_emu", "I_inf")
    problems = []
    for r in rows:
        if not r["I0_up"] >= r["I0_emu"] >= r["I_inf"]:
            problems.append(f"ordering at p_e={r['p_e']}")
        if r["p_e"] >= 0.7 and r["I_inf"] != 0.0:
            problems.append(f"I_inf nonzero at p_e={r['p_e']}")
    for a, b in zip(rows, rows[1:]):
        for c in curves:
            if b[c] > a[c]:
                problems.append(f"{c} increases at p_e={b['p_e']}")
    last = rows[-1]
    if last["p_e"] != 1.0 or any(last[c] != 0.0 for c in curves):
        problems.append("curves not zero at p_e=1")
    mid = next(r for r in rows if r["p_e"] == 0.5)
    spot = tuple(mid[c] for c in curves)
    spot_err = max(abs(a - b) for a, b in zip(spot, (0.440646, 0.234068, 0.117743)))
    if spot_err > 1e-5:
        problems.append(f"spot value off by {spot_err:.2e}")
    report(2, not problems,
           f"{len(rows)} grid points, spot at p_e=0.5 = "
           f"({spot[0]:.6f}, {spot[1]:.6f}, {spot[2]:.6f}) err {spot_err:.1e}; "
           f"problems: {problems or 'none'}")


def test_oracle_equivalence(report):
    t0 = time.perf_counter()
    cases = []

    for q in (0.3, 0.5, 0.7):
        p_x = FiniteDistribution.bernoulli(q)
        for avg in np.round(np.arange(1, 10) * 0.1, 10):
            for peak in (INF, 0.5):
                cases.append((f"pp q={q} avg={avg} peak={peak}",
                              solve_privacy_power(p_x, avg, peak).value,
                              brute_force_privacy_power(p_x, avg, peak, 1e-3)))
        for p in (0.2, 0.5, 0.8):
            p_e = FiniteDistribution.bernoulli(p)
            cases.append((f"I0 q={q} p_e={p}", solve_I0_emu(p_x, p_e).value,
                          brute_force_I0(p_x, p_e, 1e-3)))

    # fixed slope against a grid minimizer of the Lagrangian
    uniform = FiniteDistribution.bernoulli(0.5)
    mask = support_mask(uniform.alphabet, 1)
    draw = np.array([[0.0, -1.0], [1.0, 0.0]])

    def lagrangian(kernels):
        avg = np.einsum("i,mij,ij->m", uniform.mass, kernels, draw)
        return batch_information(uniform.mass, kernels) + avg

    res = solve_fixed_slope(uniform, mask, -1.0)
    grid, _ = kernel_grid_min(mask, 1000, lagrangian)
    fixed_slope_err = abs(res.info + res.average - grid)

    cases.append(("pp ternary avg=0.5 peak=1", solve_privacy_power(TERNARY, 0.5, 1).value,
                  brute_force_privacy_power(TERNARY, 0.5, 1, 1e-3)))
    cases.append(("pp ternary avg=0.5 peak=inf", solve_privacy_power(TERNARY, 0.5, INF).value,
                  brute_force_privacy_power(TERNARY, 0.5, INF, 1e-2)))
    p_e = FiniteDistribution.bernoulli(0.4)
    cases.append(("I0 ternary p_e=0.4", solve_I0_emu(TERNARY, p_e).value,
                  brute_force_I0(TERNARY, p_e, 1e-3)))

    elapsed = time.perf_counter() - t0
    worst_name, solver, oracle = max(cases, key=lambda c: abs(c[1] - c[2]))
    worst = abs(solver - oracle)
    report(3, worst <= 1e-3 and fixed_slope_err <= 1e-4 and elapsed < 60.0,
           f"{len(cases)} instances, max |solver - oracle| = {worst:.2e} ({worst_name}); "
           f"fixed-slope Lagrangian err {fixed_slope_err:.2e} (limit 1e-4); "
           f"{elapsed:.1f} s (limit 60 s)")


def test_state_known_identity(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        p_x = _random_dist(rng, int(rng.integers(2, 6)))
        p_e = _random_dist(rng, int(rng.integers(1, 5)))
        direct = sum(w * solve_peak_only(p_x, e).value for e, w in zip(p_e.alphabet, p_e.mass))
        worst = max(worst, abs(solve_I0_up(p_x, p_e).value - direct))
    report(4, worst <= 1e-12, f"50 instances, max |difference| = {worst:.2e} (limit 1e-12)")


def test_ordering_on_random_binary(report):
    rng = np.random.default_rng(5)
    worst_up, worst_inf = -np.inf, -np.inf
    for _ in range(100):
        q, p = rng.uniform(0, 1, 2)
        p_x, p_e = FiniteDistribution.bernoulli(q), FiniteDistribution.bernoulli(p)
        i0 = solve_I0_emu(p_x, p_e).value
        i0_up = solve_I0_up(p_x, p_e).value
        i_inf = solve_privacy_power(p_x, p).value
        worst_up = max(worst_up, i0 - i0_up)
        worst_inf = max(worst_inf, i_inf - i0_up)
    report(5, worst_up <= 1e-6 and worst_inf <= 1e-6,
           f"100 instances, max(I0 - I0_up) = {worst_up:.2e}, "
           f"max(I_inf - I0_up) = {worst_inf:.2e} (limit 1e-6)")


def test_simulation_convergence(report):
    p_x, p_e = FiniteDistribution.bernoulli(0.7), FiniteDistribution.bernoulli(0.5)
    sol = solve_privacy_power(p_x, 0.9 * 0.5)
    problems, lines = [], []
    slowest = 0.0
    for seed in range(1, 6):
        t0 = time.perf_counter()
        best = run_best_effort(SystemConfig(p_x, p_e, n=10**6, seed=seed), sol.kernel)
        slowest = max(slowest, time.perf_counter() - t0)
        t0 = time.perf_counter()
        hide = run_store_and_hide(SystemConfig(p_x, p_e, n=10**6, seed=seed), sol.kernel)
        slowest = max(slowest, time.perf_counter() - t0)
        short = run_best_effort(SystemConfig(p_x, p_e, n=10**4, seed=seed), sol.kernel)
        for name, rep in (("best-effort", best), ("store-and-hide", hide)):
            if abs(rep.empirical_leakage - sol.value) >= 0.01:
                problems.append(f"seed {seed} {name} leakage off by "
                                f"{rep.empirical_leakage - sol.value:+.4f}")
        if best.violation_fraction >= 1e-3:
            problems.append(f"seed {seed} violation fraction {best.violation_fraction:.1e}")
        if not best.violation_fraction < short.violation_fraction:
            problems.append(f"seed {seed} violation fraction not smaller at 1e6 "
                            f"({best.violation_fraction:.1e} vs {short.violation_fraction:.1e})")
        lines.append(f"seed {seed}: dev {best.empirical_leakage - sol.value:+.4f}/"
                     f"{hide.empirical_leakage - sol.value:+.4f}, violations "
                     f"{best.violation_count}/1e6 vs {short.violation_count}/1e4")
    if slowest >= 60.0:
        problems.append(f"slowest run {slowest:.1f} s")
    report(6, not problems,
           f"target {sol.value:.6f}; " + "; ".join(lines)
           + f"; slowest run {slowest:.2f} s; problems: {problems or 'none'}")


def test_privacy_power_properties(report):
    rng = np.random.default_rng(7)
    tol = 1e-8
    problems = []
    for trial in range(20):
        p_x = _random_dist(rng, int(rng.integers(2, 5)))
        mean, top, h = p_x.mean(), max(p_x.alphabet), p_x.entropy()
        grid = np.linspace(0.0, mean, 10)
        peaks = [0, 1, 2, INF]
        values = np.empty((len(peaks), len(grid)))
        for a, peak in enumerate(peaks):
            for b, avg in enumerate(grid):
                sol = solve_privacy_power(p_x, avg, peak)
                values[a, b] = sol.value
                if abs(kernel_information(p_x.mass, sol.kernel.matrix) - sol.value) > 1e-9:
                    problems.append(f"#{trial} self-consistency at ({avg}, {peak})")
        if np.any(values < -tol) or np.any(values > h + tol):
            problems.append(f"#{trial} value outside [0, H(X)]")
        if np.any(np.abs(values[:, 0] - h) > tol):
            problems.append(f"#{trial} avg=0 differs from H(X)")
        if abs(values[-1, -1]) > tol:
            problems.append(f"#{trial} full masking not zero")
        if np.any(np.diff(values, axis=1) > tol):
            problems.append(f"#{trial} increases in average")
        if np.any(np.diff(values, axis=0) > tol):
            problems.append(f"#{trial} increases in peak")
        for i, j in itertools.combinations(range(len(grid)), 2):
            if (i + j) % 2 == 0:
                mid = values[:, (i + j) // 2]
                if np.any(mid > 0.5 * (values[:, i] + values[:, j]) + tol):
                    problems.append(f"#{trial} convexity at ({i}, {j})")
        for e in p_x.alphabet:
            if solve_peak_only(p_x, e).value < solve_privacy_power(p_x, e, INF).value - tol:
                problems.append(f"#{trial} I(e) below I(e, inf) at e={e}")
        if top <= 2 and abs(values[2, -1]) > tol:
            problems.append(f"#{trial} peak above the alphabet not fully masking")
    report(7, not problems, f"20 distributions x 4 peaks x 10 averages; problems: "
           f"{problems[:5] or 'none'}")


def test_repeated_simulate_is_byte_identical(tmp_path, report):
    outputs = []
    for policy in ("best-effort", "store-and-hide", "zero"):
        files = []
        for run in range(2):
            path = tmp_path / f"{policy}-{run}.json"
            proc = subprocess.run(
                [sys.executable, "-m", "meterleak.cli", "simulate", "--policy", policy,
                 "--qx", "0.7", "--pe", "0.5", "--n", "100000", "--seed", "42",
                 "--out", str(path)],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
            files.append(path.read_bytes())
        json.loads(files[0])
        outputs.append((policy, files[0] == files[1]))
    same = all(ok for _, ok in outputs)
    report(8, same, ", ".join(f"{p}: {'identical' if ok else 'differs'}" for p, ok in outputs))
