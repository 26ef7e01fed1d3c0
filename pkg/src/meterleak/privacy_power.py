"""Privacy-power function: minimum leakage under average and peak AES limits.

The minimization of ``I(X;Y)`` over kernels with ``0 <= X - Y <= peak``
and ``E[X - Y] <= average`` is a rate-distortion problem with distortion
``d(x, y) = x - y`` and the peak limit folded into the support.  It is
solved by Blahut-Arimoto alternating minimization at a fixed Lagrange
slope, with bisection on the slope to meet the average constraint.

The output alphabet is taken equal to the input alphabet.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import INF, FiniteDistribution, PolicyKernel, kernel_information
from .errors import InstanceTooLargeError, NonConvergenceError, ValidationError

# Fixed-slope inner loop
MAX_INNER_ITER = 10_000
OMEGA_MAX = 64.0
# Blahut-Arimoto steps between barrier-method rescue attempts
BARRIER_EVERY = 500
# reachable outputs never drop below this mass, so none is lost for good
R_FLOOR = 1e-200
# Slope bisection
SLOPE_BRACKET = -64.0
MAX_BISECTION = 200
AVERAGE_TOL = 1e-7


def support_mask(alphabet, peak=INF) -> np.ndarray:
    """Boolean ``(x, y)`` matrix, true iff ``0 <= x - y <= peak``."""
    if peak < 0:
        raise ValidationError(f"peak constraint must be non-negative, got {peak}")
    levels = np.asarray(list(alphabet), dtype=float)
    draw = levels[:, None] - levels[None, :]
    mask = draw >= 0
    if peak != INF:
        mask &= draw <= peak
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True)
class PrivacyPowerSolution:
    """Optimal leakage together with the kernel achieving it.

    Attributes
    ----------
    value : float
        Minimum ``I(X;Y)`` in bits.
    kernel : PolicyKernel
        Unconditional kernel attaining ``value``.
    achieved_average : float
        ``E[X - Y]`` under ``kernel``.
    slope : float
        Lagrange slope at the optimum (``<= 0``; ``-inf`` when no AES
        energy may be used).
    gap : float
        Certified bound on the suboptimality of the last fixed-slope solve.
    """

    value: float
    kernel: PolicyKernel
    achieved_average: float
    slope: float
    iterations: int
    converged: bool
    gap: float = 0.0


class FixedSlopeResult(NamedTuple):
    kernel: np.ndarray
    info: float
    average: float
    output_marginal: np.ndarray
    gap: float
    iterations: int


def _check_mask(mask, n):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ValidationError(f"mask shape {mask.shape} does not match alphabet size {n}")
    if not np.all(mask.any(axis=1)):
        raise ValidationError("every input level needs at least one admissible output")
    return mask


def solve_fixed_slope(p_x: FiniteDistribution, mask, slope: float, tol: float = 1e-11,
                      r0=None, max_iter: int = MAX_INNER_ITER) -> FixedSlopeResult:
    """Minimize ``I(X;Y) - slope * E[X - Y]`` over kernels supported on ``mask``.

    Blahut-Arimoto iteration: given the output marginal ``r`` the best
    kernel is ``q(y|x) ∝ r(y) 2**(slope (x - y))`` on the mask; given
    the kernel, ``r`` is its output marginal.  Iteration stops once
    Blahut's lower bound certifies the Lagrangian to within ``tol`` bits.
    Periodically a barrier-method Newton solve on ``r`` is tried and kept
    if it certifies a smaller gap; it rescues degenerate cases where the
    alternating steps converge sublinearly.

    Raises
    ------
    NonConvergenceError
        If ``max_iter`` iterations pass without meeting ``tol``.  The
        exception carries the last :class:`FixedSlopeResult`.
    """
    if slope > 0:
        raise ValidationError(f"slope must be <= 0, got {slope}")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    px = p_x.mass
    n = len(px)
    mask = _check_mask(mask, n)
    levels = p_x.alphabet.as_array()
    draw = levels[:, None] - levels[None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        A = np.where(mask, np.exp2(slope * np.where(mask, draw, 0.0)), 0.0)
    active = px > 0

    reachable = mask[active].any(axis=0)
    if r0 is None:
        r = reachable / reachable.sum()
    else:
        r = np.asarray(r0, dtype=float) * reachable
        r = 0.99 * r / r.sum() + 0.01 * reachable / reachable.sum()

    A_act, px_act = A[active], px[active]

    def upper(r):
        return float(-px_act @ np.log2(A_act @ r))

    gap = math.inf
    it = 0
    omega = 1.0
    while True:
        c = A_act @ r
        lam = (px_act / c) @ A_act
        gap = math.log2(lam.max())
        it += 1
        if gap <= tol:
            r_kernel = r
            r = r * lam
            break
        if it >= max_iter:
            result = _fixed_slope_result(px, _kernel(A, r), draw, r * lam / (r * lam).sum(), gap, it)
            raise NonConvergenceError(
                f"fixed-slope iteration did not converge in {max_iter} steps "
                f"(slope={slope}, gap={gap:.3e})",
                iterate=result, iterations=it, gap=gap,
            )
        if it % BARRIER_EVERY == 0:
            cand = np.maximum(_barrier_solve(A_act, px_act, r, tol), R_FLOOR * reachable)
            if math.log2(((px_act / (A_act @ cand)) @ A_act).max()) < gap:
                r = cand
                continue
        # plain step r * lam; over-relaxed step r * lam**omega kept only
        # while it lowers the (convex) upper bound further
        plain = r * lam
        plain /= plain.sum()
        if omega > 1.0:
            with np.errstate(over="ignore", under="ignore", invalid="ignore"):
                fast = r * lam ** omega
                fast = np.maximum(fast / fast.sum(), R_FLOOR * reachable)
            if np.all(np.isfinite(fast)) and upper(fast) <= upper(plain):
                r = fast
                omega = min(2.0 * omega, OMEGA_MAX)
                continue
        r = np.maximum(plain, R_FLOOR * reachable)
        omega = 2.0 if omega == 1.0 else 1.0
    return _fixed_slope_result(px, _kernel(A, r_kernel), draw, r / r.sum(), gap, it)


def _barrier_solve(A, px, r, target, max_newton=400):
    """Log-barrier Newton method for ``min -sum p log(A r)`` on the simplex.

    Used when Blahut-Arimoto stalls, which happens when the optimum is
    degenerate (several output levels tie, or tiny input masses).  At an
    exact barrier minimizer with weight ``mu`` the multipliers obey
    ``max lam <= 1 + mu * k``, so ``mu`` is driven down until that bound
    is below ``target`` bits.  Newton steps are taken in variables scaled
    by ``r``, which keeps the system well conditioned for tiny masses.
    """
    reach = A.any(axis=0)
    B = A[:, reach]
    k = B.shape[1]
    x = 0.999 * r[reach] / r[reach].sum() + 0.001 / k
    mu = 1e-3
    mu_stop = 0.5 * target * math.log(2) / k
    used = 0

    def phi(v, mu):
        return float(-px @ np.log(B @ v) - mu * np.log(v).sum())

    while used < max_newton:
        for _ in range(60):
            used += 1
            c = B @ x
            w = (px / c) @ B
            if math.log2(w.max()) <= target:
                break
            g = -w - mu / x
            Bs = B * x[None, :] * (np.sqrt(px) / c)[:, None]
            gs = g * x
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = Bs.T @ Bs + mu * np.eye(k)
            kkt[:k, k] = kkt[k, :k] = x
            rhs = np.concatenate([-gs, [0.0]])
            try:
                u = np.linalg.solve(kkt, rhs)[:k]
            except np.linalg.LinAlgError:
                u = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
            dec = float(-gs @ u)
            if not np.isfinite(dec) or dec <= 1e-30:
                break
            d = x * u
            t = 1.0
            neg = u < 0
            if neg.any():
                t = min(1.0, 0.95 / float(np.max(-u[neg])))
            f0 = phi(x, mu)
            if dec > 1e-15 * max(1.0, abs(f0)):
                while t > 1e-14:
                    trial = x + t * d
                    if np.all(trial > 0) and phi(trial, mu) <= f0 - 0.25 * t * dec:
                        break
                    t *= 0.5
                else:
                    break
            else:
                # predicted decrease is below rounding; trust the Newton step
                trial = x + t * d
            x = trial / trial.sum()
        if mu <= mu_stop or math.log2(((px / (B @ x)) @ B).max()) <= target:
            break
        mu = max(0.1 * mu, mu_stop)
    out = np.zeros_like(r)
    out[reach] = x
    return out


def _kernel(A, r):
    """Best kernel for output marginal ``r``; rows nothing reaches copy ``x``."""
    c = A @ r
    dead = c <= 0
    q = r[None, :] * A / np.where(dead, 1.0, c)[:, None]
    if dead.any():
        q[dead] = np.eye(len(r))[dead]
    return q


def _fixed_slope_result(px, q, draw, r, gap, it):
    q = q / q.sum(axis=1, keepdims=True)
    info = kernel_information(px, q)
    avg = float(px @ (q * draw).sum(axis=1))
    return FixedSlopeResult(q, info, avg, r, max(gap, 0.0), it)


def _solution(p_x, q, slope, iterations, gap):
    kernel = PolicyKernel(p_x.alphabet, p_x.alphabet, q)
    return PrivacyPowerSolution(
        value=kernel_information(p_x, q),
        kernel=kernel,
        achieved_average=kernel.expected_draw(p_x),
        slope=slope,
        iterations=iterations,
        converged=True,
        gap=gap,
    )


def solve_privacy_power(p_x: FiniteDistribution, average: float, peak=INF,
                        tol: float = 1e-11) -> PrivacyPowerSolution:
    """Minimum leakage ``I(average, peak)`` and an optimal kernel.

    Parameters
    ----------
    p_x : FiniteDistribution
        Input load distribution.
    average : float
        Bound on ``E[X - Y]``, in energy units.
    peak : float
        Bound on ``X - Y`` per slot; :data:`meterleak.core.INF` for none.
    tol : float
        Certified accuracy of each fixed-slope solve, in bits.
    """
    if average < 0:
        raise ValidationError(f"average constraint must be non-negative, got {average}")
    mask = support_mask(p_x.alphabet, peak)
    n = len(p_x)
    identity = np.eye(n)
    if average == 0 or not (mask & ~np.eye(n, dtype=bool)).any():
        return _solution(p_x, identity, -math.inf, 0, 0.0)

    total_iter = 0
    top = solve_fixed_slope(p_x, mask, 0.0, tol)
    total_iter += top.iterations
    if top.average <= average:
        return _solution(p_x, top.kernel, 0.0, total_iter, top.gap)

    lo_slope = SLOPE_BRACKET
    low = solve_fixed_slope(p_x, mask, lo_slope, tol)
    total_iter += low.iterations
    while low.average > average and lo_slope > -1e6:
        lo_slope *= 2
        low = solve_fixed_slope(p_x, mask, lo_slope, tol)
        total_iter += low.iterations
    if low.average > average:
        # no finite slope spends this little; Y = X closes the bracket
        low = FixedSlopeResult(identity, p_x.entropy(), 0.0, p_x.mass, 0.0, 0)
        lo_slope = -math.inf

    hi_slope, high = 0.0, top
    warm = top.output_marginal
    for _ in range(MAX_BISECTION):
        mid = 0.5 * (lo_slope + hi_slope) if lo_slope > -math.inf else 2.0 * hi_slope
        res = solve_fixed_slope(p_x, mask, mid, tol, r0=warm)
        total_iter += res.iterations
        warm = res.output_marginal
        if res.average > average:
            hi_slope, high = mid, res
        else:
            lo_slope, low = mid, res
        if abs(res.average - average) <= AVERAGE_TOL or hi_slope - lo_slope < 1e-14:
            break

    # mix the bracketing kernels so the average lands on the constraint;
    # by convexity the mixture loses nothing on a linear stretch of the
    # curve and only O(AVERAGE_TOL) elsewhere
    w = (high.average - average) / (high.average - low.average)
    q = w * low.kernel + (1.0 - w) * high.kernel
    slope = lo_slope if w >= 0.5 else hi_slope
    return _solution(p_x, q, slope, total_iter, max(low.gap, high.gap))


def solve_peak_only(p_x: FiniteDistribution, e: float, tol: float = 1e-11) -> PrivacyPowerSolution:
    """Constant-harvest leakage ``I(e) = I(e, e)``."""
    return solve_privacy_power(p_x, e, e, tol)


# ---------------------------------------------------------------------------
# brute-force oracle


def simplex_grid(k: int, steps: int) -> np.ndarray:
    """All points of the ``k``-simplex with coordinates in ``{0, 1/steps, ..., 1}``."""
    if k == 1:
        return np.ones((1, 1))
    pts = []
    for bars in itertools.combinations(range(steps + k - 1), k - 1):
        edges = (-1,) + bars + (steps + k - 1,)
        pts.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    return np.asarray(pts, dtype=float) / steps


def kernel_grid_min(mask, steps, objective, max_points=20_000_000, chunk=200_000):
    """Minimize ``objective(kernels)`` over every grid kernel on ``mask``.

    ``objective`` receives a batch of kernels, shape ``(m, |X|, |Y|)``, and
    returns ``m`` values.  Rows of ``mask`` index conditioning tuples.
    """
    rows = []
    for allowed in mask:
        idx = np.flatnonzero(allowed)
        g = simplex_grid(len(idx), steps)
        full = np.zeros((len(g), mask.shape[1]))
        full[:, idx] = g
        rows.append(full)
    sizes = [len(g) for g in rows]
    total = math.prod(sizes)
    if total > max_points:
        raise InstanceTooLargeError(f"grid has {total} kernels, limit is {max_points}")
    best = math.inf
    best_kernel = None
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        picks = np.unravel_index(flat, sizes)
        batch = np.stack([rows[i][picks[i]] for i in range(len(rows))], axis=1)
        vals = objective(batch)
        j = int(np.argmin(vals))
        if vals[j] < best:
            best, best_kernel = float(vals[j]), batch[j]
    return best, best_kernel


def batch_information(px, kernels) -> np.ndarray:
    """``I(X;Y)`` for a batch of channels, shape ``(m, |X|, |Y|)``."""
    joint = px[None, :, None] * kernels
    py = joint.sum(axis=1)
    denom = px[None, :, None] * py[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log2(joint / denom), 0.0)
    return np.maximum(terms.sum(axis=(1, 2)), 0.0)


def brute_force_privacy_power(p_x: FiniteDistribution, average: float, peak=INF,
                              grid_step: float = 1e-3) -> float:
    """Grid-search upper bound on ``I(average, peak)`` for ``|X| <= 3``.

    Grid kernels that overspend the average are mixed with ``Y = X``
    until the average constraint holds with equality; the result is
    always a feasible kernel, so the minimum never undershoots the
    true value.
    """
    if len(p_x) > 3:
        raise InstanceTooLargeError("brute force is limited to |X| <= 3")
    if grid_step < 1e-3:
        raise InstanceTooLargeError("grid_step must be at least 1e-3")
    steps = int(round(1.0 / grid_step))
    px = p_x.mass
    mask = support_mask(p_x.alphabet, peak)
    levels = p_x.alphabet.as_array()
    draw = levels[:, None] - levels[None, :]
    eye = np.eye(len(px))

    def objective(kernels):
        avg = np.einsum("i,mij,ij->m", px, kernels, draw)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(avg > average, average / avg, 1.0)
        mixed = w[:, None, None] * kernels + (1.0 - w)[:, None, None] * eye
        return batch_information(px, mixed)

    value, _ = kernel_grid_min(mask, steps, objective)
    return value
