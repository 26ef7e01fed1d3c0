"""Finite-alphabet probability primitives and the shared domain types.

All information quantities are in bits. Energy levels are non-negative
integers (one level is one quantization step); fractional loads must be
quantized before they reach this module, see :mod:`meterleak.traceio`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ValidationError

#: Absolute tolerance on probability sums.
PROB_TOL = 1e-12

#: Sentinel for an unbounded peak constraint or battery capacity.
INF = math.inf


def _readonly(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EnergyAlphabet:
    """Strictly increasing tuple of non-negative integer energy levels."""

    levels: tuple

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if any(int(v) != v for v in self.levels):
            raise ValidationError(f"energy levels must be integers, got {self.levels!r}")
        if not levels:
            raise ValidationError("energy alphabet must be non-empty")
        if levels[0] < 0:
            raise ValidationError("energy levels must be non-negative")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError(f"energy levels must be strictly increasing: {levels}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def range(cls, max_level: int) -> "EnergyAlphabet":
        """The contiguous alphabet ``{0, 1, ..., max_level}``."""
        return cls(tuple(range(int(max_level) + 1)))

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def index(self, level) -> int:
        try:
            return self.levels.index(int(level))
        except ValueError:
            raise ValidationError(f"level {level} not in alphabet {self.levels}") from None

    @property
    def max(self) -> int:
        return self.levels[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=float)


def _as_alphabet(alphabet) -> EnergyAlphabet:
    if isinstance(alphabet, EnergyAlphabet):
        return alphabet
    return EnergyAlphabet(tuple(alphabet))


def _check_pmf(mass, what="distribution"):
    if mass.ndim != 1:
        raise ValidationError(f"{what} mass must be one-dimensional")
    if not np.all(np.isfinite(mass)):
        raise ValidationError(f"{what} has non-finite mass")
    if np.any(mass < 0) or np.any(mass > 1):
        raise ValidationError(f"{what} mass outside [0, 1]: {mass}")
    total = float(mass.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ValidationError(f"{what} sums to {total!r}, not 1")


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    """Probability mass function on an :class:`EnergyAlphabet`."""

    alphabet: EnergyAlphabet
    mass: np.ndarray

    def __post_init__(self):
        alphabet = _as_alphabet(self.alphabet)
        mass = _readonly(self.mass)
        if mass.shape != (len(alphabet),):
            raise ValidationError(
                f"mass has shape {mass.shape}, alphabet has {len(alphabet)} levels"
            )
        _check_pmf(mass)
        object.__setattr__(self, "alphabet", alphabet)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def bernoulli(cls, p: float) -> "FiniteDistribution":
        """Distribution on ``{0, 1}`` with ``Pr{1} = p``."""
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"Bernoulli parameter {p} outside [0, 1]")
        return cls(EnergyAlphabet((0, 1)), [1.0 - p, p])

    @classmethod
    def point_mass(cls, level: int, alphabet=None) -> "FiniteDistribution":
        alphabet = _as_alphabet(alphabet) if alphabet is not None else EnergyAlphabet((level,))
        mass = np.zeros(len(alphabet))
        mass[alphabet.index(level)] = 1.0
        return cls(alphabet, mass)

    @classmethod
    def uniform(cls, alphabet) -> "FiniteDistribution":
        alphabet = _as_alphabet(alphabet)
        return cls(alphabet, np.full(len(alphabet), 1.0 / len(alphabet)))

    @classmethod
    def from_counts(cls, alphabet, counts) -> "FiniteDistribution":
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        if total <= 0:
            raise ValidationError("cannot normalize empty counts")
        return cls(alphabet, counts / total)

    def __len__(self):
        return len(self.alphabet)

    def __eq__(self, other):
        if not isinstance(other, FiniteDistribution):
            return NotImplemented
        return self.alphabet == other.alphabet and np.array_equal(self.mass, other.mass)

    def __hash__(self):
        return hash((self.alphabet, self.mass.tobytes()))

    def prob(self, level) -> float:
        return float(self.mass[self.alphabet.index(level)])

    def mean(self) -> float:
        return float(self.mass @ self.alphabet.as_array())

    def entropy(self) -> float:
        return entropy(self.mass)

    def tail(self, level) -> float:
        """``Pr{V >= level}``."""
        return float(self.mass[self.alphabet.as_array() >= level].sum())

    def to_dict(self) -> dict:
        return {"levels": list(self.alphabet.levels), "mass": [float(m) for m in self.mass]}

    @classmethod
    def from_dict(cls, d) -> "FiniteDistribution":
        return cls(EnergyAlphabet(tuple(d["levels"])), d["mass"])


@dataclass(frozen=True, eq=False)
class PolicyKernel:
    """Randomized power-allocation rule.

    ``matrix`` has shape ``(|X|, |Y|)`` for an unconditional kernel
    ``p(y|x)`` and ``(|X|, |E|, |Y|)`` for a state-dependent kernel
    ``p(y|x,e)``.  The last axis always indexes the output load.
    """

    x_alphabet: EnergyAlphabet
    y_alphabet: EnergyAlphabet
    matrix: np.ndarray
    e_alphabet: Optional[EnergyAlphabet] = None

    def __post_init__(self):
        xa = _as_alphabet(self.x_alphabet)
        ya = _as_alphabet(self.y_alphabet)
        ea = None if self.e_alphabet is None else _as_alphabet(self.e_alphabet)
        m = _readonly(self.matrix)
        want = (len(xa), len(ya)) if ea is None else (len(xa), len(ea), len(ya))
        if m.shape != want:
            raise ValidationError(f"kernel matrix has shape {m.shape}, expected {want}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValidationError("kernel entries must be finite and non-negative")
        sums = m.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValidationError(f"kernel rows do not sum to 1 (worst {np.max(np.abs(sums - 1))})")
        object.__setattr__(self, "x_alphabet", xa)
        object.__setattr__(self, "y_alphabet", ya)
        object.__setattr__(self, "e_alphabet", ea)
        object.__setattr__(self, "matrix", m)

    @property
    def kind(self) -> str:
        return "unconditional" if self.e_alphabet is None else "state-dependent"

    @property
    def state_dependent(self) -> bool:
        return self.e_alphabet is not None

    @classmethod
    def identity(cls, alphabet) -> "PolicyKernel":
        """``Y = X``: everything from the grid."""
        alphabet = _as_alphabet(alphabet)
        return cls(alphabet, alphabet, np.eye(len(alphabet)))

    @classmethod
    def greedy(cls, x_alphabet, e_alphabet) -> "PolicyKernel":
        """State-dependent kernel drawing as much harvested energy as allowed.

        ``y`` is the smallest output level with ``0 <= x - y <= e``.
        """
        xa, ea = _as_alphabet(x_alphabet), _as_alphabet(e_alphabet)
        m = np.zeros((len(xa), len(ea), len(xa)))
        for i, x in enumerate(xa):
            for k, e in enumerate(ea):
                j = next(j for j, y in enumerate(xa) if 0 <= x - y <= e)
                m[i, k, j] = 1.0
        return cls(xa, xa, m, ea)

    def row(self, x, e=None) -> np.ndarray:
        i = self.x_alphabet.index(x)
        if self.e_alphabet is None:
            return self.matrix[i]
        if e is None:
            raise ValidationError("state-dependent kernel needs a harvest state")
        return self.matrix[i, self.e_alphabet.index(e)]

    def energy_draw(self) -> np.ndarray:
        """``x - y`` broadcast to the shape of ``matrix``."""
        x = self.x_alphabet.as_array()
        y = self.y_alphabet.as_array()
        d = x[:, None] - y[None, :]
        return d if self.e_alphabet is None else d[:, None, :]

    def respects(self, mask: np.ndarray, atol: float = 0.0) -> bool:
        """True if no mass sits outside the boolean feasibility ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        return bool(np.all(self.matrix[~mask] <= atol))

    def induced(self, p_e: FiniteDistribution) -> "PolicyKernel":
        """Channel seen by an observer blind to the state: ``sum_e p(e) q(y|x,e)``."""
        if self.e_alphabet is None:
            return self
        if p_e.alphabet != self.e_alphabet:
            raise ValidationError("harvest distribution alphabet does not match kernel")
        m = np.einsum("k,ikj->ij", p_e.mass, self.matrix)
        return PolicyKernel(self.x_alphabet, self.y_alphabet, m / m.sum(axis=1, keepdims=True))

    def joint(self, p_x: FiniteDistribution, p_e: Optional[FiniteDistribution] = None) -> np.ndarray:
        """Joint pmf indexed ``[x, y]`` or, with ``p_e``, ``[x, y, e]``."""
        if p_x.alphabet != self.x_alphabet:
            raise ValidationError("input distribution alphabet does not match kernel")
        if self.e_alphabet is None:
            if p_e is not None:
                raise ValidationError("unconditional kernel takes no harvest distribution")
            return p_x.mass[:, None] * self.matrix
        if p_e is None:
            raise ValidationError("state-dependent kernel needs p_e to form a joint")
        if p_e.alphabet != self.e_alphabet:
            raise ValidationError("harvest distribution alphabet does not match kernel")
        return np.einsum("i,k,ikj->ijk", p_x.mass, p_e.mass, self.matrix)

    def expected_draw(self, p_x: FiniteDistribution, p_e: Optional[FiniteDistribution] = None) -> float:
        """``E[X - Y]`` under the kernel."""
        if self.e_alphabet is None:
            return float(np.sum(self.joint(p_x) * self.energy_draw()))
        return float(np.sum(self.joint(p_x, p_e) * np.moveaxis(self.energy_draw(), 1, 2)))

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "x_levels": list(self.x_alphabet.levels),
            "y_levels": list(self.y_alphabet.levels),
            "matrix": self.matrix.tolist(),
        }
        if self.e_alphabet is not None:
            d["e_levels"] = list(self.e_alphabet.levels)
        return d

    @classmethod
    def from_dict(cls, d) -> "PolicyKernel":
        ea = d.get("e_levels")
        return cls(
            EnergyAlphabet(tuple(d["x_levels"])),
            EnergyAlphabet(tuple(d["y_levels"])),
            np.asarray(d["matrix"], dtype=float),
            None if ea is None else EnergyAlphabet(tuple(ea)),
        )


# ---------------------------------------------------------------------------
# information measures


def _xlogx(p):
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log2(p[pos])
    return out


def binary_entropy(p: float) -> float:
    """Binary entropy ``h(p)`` in bits, with ``h(0) = h(1) = 0``."""
    if not (0.0 <= p <= 1.0):
        raise ValidationError(f"binary entropy argument {p} outside [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    return float(-p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p))


def entropy(mass) -> float:
    """Shannon entropy in bits of a pmf given as an array."""
    return float(-_xlogx(mass).sum())


def validate_joint(joint, ndim=None) -> np.ndarray:
    joint = np.asarray(joint, dtype=float)
    if ndim is not None and joint.ndim != ndim:
        raise ValidationError(f"joint must have {ndim} axes, got {joint.ndim}")
    if not np.all(np.isfinite(joint)) or np.any(joint < 0):
        raise ValidationError("joint entries must be finite and non-negative")
    total = float(joint.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ValidationError(f"joint sums to {total!r}, not 1")
    return joint


def mutual_information(joint) -> float:
    """``I(X;Y)`` in bits from a joint pmf indexed ``[x, y]``."""
    joint = validate_joint(joint, ndim=2)
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    pos = joint > 0
    # divide in two steps so tiny marginals do not underflow the product
    ratio = (joint / np.where(px > 0, px, 1.0)[:, None])[pos] / np.broadcast_to(py, joint.shape)[pos]
    return max(0.0, float(np.sum(joint[pos] * np.log2(ratio))))


def conditional_mutual_information(joint, atol: float = PROB_TOL) -> float:
    """``I(X;Y|E)`` in bits from a joint indexed ``[x, y, e]``.

    The ``(x, e)`` marginal must factorize: the harvest process is
    independent of the load.
    """
    joint = validate_joint(joint, ndim=3)
    pxe = joint.sum(axis=1)
    px, pe = pxe.sum(axis=1), pxe.sum(axis=0)
    if np.max(np.abs(pxe - np.outer(px, pe))) > atol:
        raise ValidationError("X and E are not independent under this joint")
    total = 0.0
    for k, w in enumerate(pe):
        if w > 0:
            total += w * mutual_information(joint[:, :, k] / w)
    return total


def joint_from_kernel(p_x, kernel_matrix) -> np.ndarray:
    """Joint ``[x, y]`` from a pmf and a row-stochastic matrix."""
    p_x = p_x.mass if isinstance(p_x, FiniteDistribution) else np.asarray(p_x, dtype=float)
    return p_x[:, None] * np.asarray(kernel_matrix, dtype=float)


def kernel_information(p_x, kernel_matrix) -> float:
    """``I(X;Y)`` for input pmf ``p_x`` through channel ``kernel_matrix``."""
    return mutual_information(joint_from_kernel(p_x, kernel_matrix))


def random_distribution(alphabet, rng, concentration: float = 1.0) -> FiniteDistribution:
    """Dirichlet-distributed pmf, renormalized to meet :data:`PROB_TOL`."""
    alphabet = _as_alphabet(alphabet)
    mass = rng.dirichlet(np.full(len(alphabet), concentration))
    return FiniteDistribution(alphabet, mass / mass.sum())
