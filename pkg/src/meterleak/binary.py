"""Closed-form leakage rates for a binary load and a binary harvest.

``q_x = Pr{X = 1}`` and ``p_e = Pr{E = 1}``; one harvested unit covers a
unit load.  These serve as analytic references for the numerical
solvers and generate the infinite/zero battery comparison curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import binary_entropy
from .errors import ValidationError

SWEEP_COLUMNS = ("p_e", "I_inf", "I0_emu", "I0_up")


@dataclass(frozen=True)
class BinaryScenario:
    q_x: float
    p_e: float

    def __post_init__(self):
        for name in ("q_x", "p_e"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")


def _xlog2x(v):
    return 0.0 if v <= 0.0 else v * math.log2(v)


def binary_I_infinity(s: BinaryScenario) -> float:
    """Infinite-battery leakage ``I(p_e, inf)``; zero once ``p_e >= q_x``."""
    q, p = s.q_x, s.p_e
    if p >= q:
        return 0.0
    return max(0.0, _xlog2x(p) - _xlog2x(q) - _xlog2x(1.0 - q + p))


def binary_I0_emu(s: BinaryScenario) -> float:
    """Zero battery, state hidden from the utility: greedy use of the harvest."""
    q, p = s.q_x, s.p_e
    return max(0.0, binary_entropy(1.0 - q + p * q) - q * binary_entropy(p))


def binary_I0_up(s: BinaryScenario) -> float:
    """Zero battery, state known to the utility: ``(1 - p_e) h(q_x)``."""
    return (1.0 - s.p_e) * binary_entropy(s.q_x)


def figure4_sweep(q_x: float, p_e_grid) -> list[dict]:
    """The three leakage curves over a grid of harvest probabilities.

    Returns one dict per grid point with keys :data:`SWEEP_COLUMNS`.
    """
    rows = []
    for p in p_e_grid:
        s = BinaryScenario(q_x, float(p))
        rows.append({
            "p_e": float(p),
            "I_inf": binary_I_infinity(s),
            "I0_emu": binary_I0_emu(s),
            "I0_up": binary_I0_up(s),
        })
    return rows


def parse_grid(text: str) -> np.ndarray:
    """Parse ``start:stop:step`` (inclusive of ``stop``) into grid points.

    ``"0:1:0.05"`` gives 21 points; ``"0:0:1"`` gives the single point 0.
    """
    try:
        start, stop, step = (float(t) for t in text.split(":"))
    except ValueError:
        raise ValidationError(f"grid must look like start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise ValidationError(f"invalid grid {text!r}")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    pts = start + step * np.arange(count)
    # keep the decimal the user wrote, e.g. 0.35 rather than 0.35000000000000003
    digits = max(_decimals(t) for t in text.split(":"))
    return np.round(pts, digits)


def _decimals(token: str) -> int:
    token = token.strip().lower()
    if "e" in token:
        return 15
    return len(token.split(".")[1]) if "." in token else 0
