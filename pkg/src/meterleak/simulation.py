"""Monte-Carlo simulation of the battery and the energy-management policies.

Every slot ``t`` the user asks for ``x_t``, the harvester delivers
``e_t`` and the policy decides the grid draw ``y_t <= x_t``; the gap
``x_t - y_t`` comes out of the battery::

    s_{t+1} = max(min(s_t + e_t - (x_t - y_t), B_max), 0)

Three policies are provided:

``store-and-hide``
    Grid only for the first ``h(n)`` slots while the battery fills, then
    ``y_t`` drawn from a kernel ``p(y|x)``.
``best-effort``
    Kernel from the first slot; whenever the battery cannot cover
    ``x_t - y_t`` the whole load goes to the grid (``y_t = x_t``).
``zero``
    No battery; ``y_t`` drawn from a state-dependent kernel
    ``p(y|x,e)`` that never asks for more than ``e_t``.

Leakage is estimated with the plug-in mutual information of the
empirical single-slot joint of ``(x_t, y_t)``.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import INF, FiniteDistribution, PolicyKernel, mutual_information
from .errors import ConfigurationError, ValidationError
from .zero_battery import state_feasibility_mask

#: Required margin in ``E[X - Y] < mean harvest``.
STRICT_MARGIN = 1e-9

TRACE_COLUMNS = ("t", "x", "y", "e", "s", "violated")


def default_storage_phase(n: int) -> int:
    """``ceil(sqrt(n))``: grows without bound but is ``o(n)``."""
    return math.ceil(math.sqrt(n))


@dataclass(frozen=True)
class SystemConfig:
    """Load and harvest statistics, battery size, horizon and seed.

    ``b_max`` is :data:`meterleak.core.INF` for an unbounded battery.
    ``storage_phase`` defaults to ``ceil(sqrt(n))`` and only matters for
    store-and-hide.
    """

    p_x: FiniteDistribution
    p_e: FiniteDistribution
    b_max: float = INF
    n: int = 1_000_000
    seed: int = 0
    storage_phase: Optional[int] = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError(f"horizon must be a positive integer, got {self.n}")
        if self.b_max < 0:
            raise ConfigurationError(f"battery capacity must be non-negative, got {self.b_max}")
        if self.b_max != INF and int(self.b_max) != self.b_max:
            raise ConfigurationError("finite battery capacity must be a whole number of units")
        h = default_storage_phase(self.n) if self.storage_phase is None else int(self.storage_phase)
        if not 0 <= h < self.n:
            raise ConfigurationError(f"storage phase {h} must satisfy 0 <= h < n={self.n}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "storage_phase", h)

    @property
    def mean_harvest(self) -> float:
        return self.p_e.mean()

    def echo(self) -> dict:
        return {
            "p_x": self.p_x.to_dict(),
            "p_e": self.p_e.to_dict(),
            "b_max": "inf" if self.b_max == INF else int(self.b_max),
            "n": self.n,
            "seed": int(self.seed),
            "storage_phase": self.storage_phase,
        }


@dataclass(frozen=True)
class BatteryState:
    level: float

    def __post_init__(self):
        if self.level < 0:
            raise ValidationError(f"battery level {self.level} is negative")


def step_battery(s, e, x, y, b_max=INF):
    """One application of the battery recursion.

    ``s`` may be a number or a :class:`BatteryState`; the same type is
    returned.
    """
    if y > x or y < 0:
        raise ValidationError(f"grid draw y={y} must satisfy 0 <= y <= x={x}")
    wrap = isinstance(s, BatteryState)
    level = s.level if wrap else s
    nxt = max(min(level + e - (x - y), b_max), 0)
    return BatteryState(nxt) if wrap else nxt


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    """Per-slot record; ``s[t]`` is the battery at the start of slot ``t``."""

    x: np.ndarray
    y: np.ndarray
    e: np.ndarray
    s: np.ndarray
    violated: np.ndarray

    def __len__(self):
        return len(self.x)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.y, self.e, self.s, self.violated):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for t, row in enumerate(zip(self.x.tolist(), self.y.tolist(), self.e.tolist(),
                                        self.s.tolist(), self.violated.tolist()), start=1):
                w.writerow((t, *row[:4], int(row[4])))


@dataclass(frozen=True)
class SimulationReport:
    """Outcome of one run.

    ``violation_count`` counts slots where the kernel's request exceeded
    the energy available and the load fell back to the grid.
    ``conditional_leakage`` (``I(X;Y|E)``) is only filled in for the
    zero-battery policy.
    """

    policy: str
    empirical_leakage: float
    violation_count: int
    n: int
    mean_battery: float
    final_battery: float
    mean_draw: float
    storage_phase: int
    config: dict
    trace_digest: str
    conditional_leakage: Optional[float] = None
    fallback: str = "grid"
    trace: Optional[SimulationTrace] = field(default=None, repr=False, compare=False)

    @property
    def violation_fraction(self) -> float:
        return self.violation_count / self.n

    def to_dict(self) -> dict:
        d = {
            "policy": self.policy,
            "empirical_leakage": self.empirical_leakage,
            "conditional_leakage": self.conditional_leakage,
            "violation_count": self.violation_count,
            "violation_fraction": self.violation_fraction,
            "n": self.n,
            "mean_battery": self.mean_battery,
            "final_battery": _json_level(self.final_battery),
            "mean_draw": self.mean_draw,
            "storage_phase": self.storage_phase,
            "fallback": self.fallback,
            "trace_digest": self.trace_digest,
            "config": self.config,
        }
        return d


def _json_level(v):
    return v if v != INF else "inf"


# ---------------------------------------------------------------------------
# sampling


def _streams(seed):
    """Independent generators for load, harvest and policy randomness.

    Separate streams keep the first ``k`` slots identical across horizons
    for the same seed.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3)]


def _sampling_cdf(rows):
    """Row-wise CDF with entries at and after the last positive mass set to inf."""
    rows = np.asarray(rows, dtype=float)
    cdf = np.cumsum(rows, axis=-1)
    last = rows.shape[-1] - 1 - np.argmax((rows > 0)[..., ::-1], axis=-1)
    idx = np.arange(rows.shape[-1])
    cdf = np.where(idx >= last[..., None], np.inf, cdf)
    return cdf


def sample_indices(rows, which, rng) -> np.ndarray:
    """Draw one column index per entry of ``which`` from ``rows[which]``."""
    cdf = _sampling_cdf(rows)
    u = rng.random(len(which))
    return np.argmax(cdf[which] > u[:, None], axis=1)


def draw_iid(dist: FiniteDistribution, n: int, rng) -> np.ndarray:
    """``n`` i.i.d. level indices from ``dist``."""
    cdf = _sampling_cdf(dist.mass[None, :])[0]
    return np.searchsorted(cdf, rng.random(n), side="right")


def sample_policy(kernel: PolicyKernel, x, e=None, rng=None):
    """Draw a grid request ``y`` for load ``x`` (and harvest ``e``)."""
    if rng is None:
        raise ValidationError("sample_policy needs a random generator")
    try:
        row = kernel.row(x, e)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from None
    cdf = _sampling_cdf(row[None, :])[0]
    j = int(np.searchsorted(cdf, rng.random(), side="right"))
    return kernel.y_alphabet[j]


# ---------------------------------------------------------------------------
# estimators


def _contingency(a, b, c=None):
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    if c is None:
        counts = np.bincount(ia * len(ub) + ib, minlength=len(ua) * len(ub))
        return counts.reshape(len(ua), len(ub))
    uc, ic = np.unique(c, return_inverse=True)
    flat = (ia * len(ub) + ib) * len(uc) + ic
    counts = np.bincount(flat, minlength=len(ua) * len(ub) * len(uc))
    return counts.reshape(len(ua), len(ub), len(uc))


def estimate_leakage(trace: SimulationTrace) -> float:
    """Plug-in ``I(X;Y)`` of the empirical joint over all slots, in bits."""
    if len(trace) == 0:
        raise ValidationError("empty trace")
    counts = _contingency(trace.x, trace.y)
    return mutual_information(counts / counts.sum())


def estimate_conditional_leakage(trace: SimulationTrace) -> float:
    """Plug-in ``I(X;Y|E)``: per-harvest-state estimates weighted by frequency."""
    if len(trace) == 0:
        raise ValidationError("empty trace")
    counts = _contingency(trace.x, trace.y, trace.e).astype(float)
    total = counts.sum()
    value = 0.0
    for k in range(counts.shape[2]):
        nk = counts[:, :, k].sum()
        if nk > 0:
            value += nk / total * mutual_information(counts[:, :, k] / nk)
    return value


# ---------------------------------------------------------------------------
# policies


def _check_unconditional(config, kernel, allow_nonstrict):
    if kernel.state_dependent:
        raise ConfigurationError("this policy needs an unconditional kernel p(y|x)")
    if kernel.x_alphabet != config.p_x.alphabet:
        raise ConfigurationError("kernel input alphabet differs from the load alphabet")
    x = kernel.x_alphabet.as_array()
    y = kernel.y_alphabet.as_array()
    if not kernel.respects((y[None, :] <= x[:, None]) & (y[None, :] >= 0)):
        raise ConfigurationError("kernel puts mass on y > x")
    draw = kernel.expected_draw(config.p_x)
    budget = config.mean_harvest
    if not draw < budget - STRICT_MARGIN:
        msg = (f"kernel draws E[X-Y]={draw:.9g} from a harvest averaging {budget:.9g}; "
               "the policies need a strict inequality")
        if not allow_nonstrict:
            raise ConfigurationError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


def _run_battery_policy(config, kernel, storage_phase, policy):
    rx, re, ry = _streams(config.seed)
    n = config.n
    x_idx = draw_iid(config.p_x, n, rx)
    e_idx = draw_iid(config.p_e, n, re)
    y_idx = sample_indices(kernel.matrix, x_idx, ry)
    x = np.asarray(config.p_x.alphabet.levels, dtype=np.int64)[x_idx]
    e = np.asarray(config.p_e.alphabet.levels, dtype=np.int64)[e_idx]
    y_req = np.asarray(kernel.y_alphabet.levels, dtype=np.int64)[y_idx]
    need = (x - y_req).tolist()
    e_list = e.tolist()

    b_max = config.b_max
    bounded = b_max != INF
    if bounded:
        b_max = int(b_max)
    s = 0
    levels = [0] * n
    accept = [True] * n
    for t in range(storage_phase):
        levels[t] = s
        accept[t] = False
        s += e_list[t]
        if bounded and s > b_max:
            s = b_max
    violations = 0
    for t in range(storage_phase, n):
        levels[t] = s
        avail = s + e_list[t]
        d = need[t]
        if avail >= d:
            s = avail - d
        else:
            s = avail
            accept[t] = False
            violations += 1
        if bounded and s > b_max:
            s = b_max
    accept_arr = np.asarray(accept)
    y = np.where(accept_arr, y_req, x)
    violated = np.zeros(n, dtype=bool)
    violated[storage_phase:] = ~accept_arr[storage_phase:]
    trace = SimulationTrace(x, y, e, np.asarray(levels, dtype=np.int64), violated)
    return _report(policy, config, trace, violations, s, storage_phase)


def _report(policy, config, trace, violations, final, storage_phase, conditional=None):
    return SimulationReport(
        policy=policy,
        empirical_leakage=estimate_leakage(trace),
        violation_count=int(violations),
        n=config.n,
        mean_battery=float(trace.s.mean()),
        final_battery=final,
        mean_draw=float((trace.x - trace.y).mean()),
        storage_phase=storage_phase,
        config=config.echo(),
        trace_digest=trace.digest(),
        conditional_leakage=conditional,
        trace=trace,
    )


def run_store_and_hide(config: SystemConfig, kernel: PolicyKernel,
                       allow_nonstrict: bool = False) -> SimulationReport:
    """Fill the battery from the harvest for ``h(n)`` slots, then hide.

    In the hiding phase ``y_t`` is drawn from ``kernel``; a request the
    battery cannot cover is served from the grid for that slot only and
    counted as a violation.
    """
    _check_unconditional(config, kernel, allow_nonstrict)
    return _run_battery_policy(config, kernel, config.storage_phase, "store-and-hide")


def run_best_effort(config: SystemConfig, kernel: PolicyKernel,
                    allow_nonstrict: bool = False) -> SimulationReport:
    """Apply ``kernel`` from the first slot, falling back to ``y_t = x_t``."""
    _check_unconditional(config, kernel, allow_nonstrict)
    return _run_battery_policy(config, kernel, 0, "best-effort")


def run_zero_battery(config: SystemConfig, kernel: PolicyKernel) -> SimulationReport:
    """Batteryless operation: ``y_t ~ kernel(.|x_t, e_t)`` independently per slot."""
    if config.b_max != 0:
        raise ConfigurationError("zero-battery policy needs b_max = 0")
    if not kernel.state_dependent:
        raise ConfigurationError("zero-battery policy needs a state-dependent kernel p(y|x,e)")
    if kernel.x_alphabet != config.p_x.alphabet or kernel.e_alphabet != config.p_e.alphabet:
        raise ConfigurationError("kernel alphabets differ from the load/harvest alphabets")
    if kernel.y_alphabet != kernel.x_alphabet:
        raise ConfigurationError("zero-battery kernel must output on the load alphabet")
    if not kernel.respects(state_feasibility_mask(kernel.x_alphabet, kernel.e_alphabet)):
        raise ConfigurationError("kernel requests more energy than was harvested")
    rx, re, ry = _streams(config.seed)
    n = config.n
    x_idx = draw_iid(config.p_x, n, rx)
    e_idx = draw_iid(config.p_e, n, re)
    n_e = len(config.p_e)
    rows = kernel.matrix.reshape(-1, kernel.matrix.shape[-1])
    y_idx = sample_indices(rows, x_idx * n_e + e_idx, ry)
    x = np.asarray(config.p_x.alphabet.levels, dtype=np.int64)[x_idx]
    e = np.asarray(config.p_e.alphabet.levels, dtype=np.int64)[e_idx]
    y = np.asarray(kernel.y_alphabet.levels, dtype=np.int64)[y_idx]
    trace = SimulationTrace(x, y, e, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
    return _report("zero", config, trace, 0, 0, 0,
                   conditional=estimate_conditional_leakage(trace))
