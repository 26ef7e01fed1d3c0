"""Zero-battery leakage with a random harvest state.

Without storage the energy drawn in a slot is capped by what was just
harvested, ``0 <= x - y <= e``.  Two observers are considered:

* the utility sees only ``Y`` (``solve_I0_emu``): minimize ``I(X;Y)``;
* the utility also sees ``E`` (``solve_I0_up``): the minimum of
  ``I(X;Y|E)`` splits into one peak-only problem per harvest state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import FiniteDistribution, PolicyKernel, kernel_information
from .errors import InstanceTooLargeError, NonConvergenceError, ValidationError
from .privacy_power import batch_information, kernel_grid_min, solve_peak_only

MAX_ITER = 50_000
MIN_STEP = 1e-12
MAX_STEP = 1e6
REL_TOL = 1e-10
# largest gap accepted once the objective stops decreasing
STALL_GAP = 1e-7
# exponentiated-gradient steps between barrier-method rescue attempts
BARRIER_EVERY = 200


def state_feasibility_mask(x_alphabet, e_alphabet) -> np.ndarray:
    """Boolean ``(x, e, y)`` tensor, true iff ``0 <= x - y <= e`` (``Y = X``)."""
    x = np.asarray(list(x_alphabet), dtype=float)
    e = np.asarray(list(e_alphabet), dtype=float)
    draw = x[:, None, None] - x[None, None, :]
    mask = (draw >= 0) & (draw <= e[None, :, None])
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True)
class ZeroBatterySolution:
    """Minimum zero-battery leakage and a state-dependent kernel achieving it.

    ``variant`` is ``"emu-only"`` or ``"up-known"``.  ``gap`` bounds how far
    ``value`` can sit above the true minimum.  ``history`` holds the
    objective after every accepted step when it was requested.
    """

    value: float
    kernel: PolicyKernel
    variant: str
    iterations: int
    converged: bool
    gap: float = 0.0
    history: tuple = field(default=(), repr=False)


def _induced(q, pe):
    return np.einsum("k,ikj->ij", pe, q)


def _objective(px, pe, q):
    return kernel_information(px, _induced(q, pe))


def _row_divergence(W, r):
    """``D(W_x || r)`` for every input row ``x``, in bits."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(W > 0, W * np.log2(W / r[None, :]), 0.0)
    return t.sum(axis=1)


def _barrier_solve(px, pe, mask, q0, target, max_newton=300):
    """Log-barrier Newton method for the zero-battery problem.

    Works on the feasible entries of the rows ``(x, e)`` with positive
    weight; Newton steps are scaled by the current kernel so tiny
    entries stay well conditioned.  Returns ``None`` if the linear
    algebra breaks down.
    """
    n_x, n_e, n_y = mask.shape
    rows = (px[:, None] > 0) & (pe[None, :] > 0)
    live = mask & rows[:, :, None]
    xi, ei, yi = np.nonzero(live)
    nv = len(xi)
    if nv == 0:
        return None
    row_id = np.ravel_multi_index((xi, ei), (n_x, n_e))
    _, row_of = np.unique(row_id, return_inverse=True)
    n_rows = row_of.max() + 1
    C = np.zeros((n_rows, nv))
    C[row_of, np.arange(nv)] = 1.0
    # W[x, y] = sum_e pe[e] q[x, e, y]  ->  J maps variables to flat (x, y)
    wi = xi * n_y + yi
    J = np.zeros((n_x * n_y, nv))
    J[wi, np.arange(nv)] = pe[ei]

    uniform = (mask / mask.sum(axis=2, keepdims=True))[live]
    v = 0.999 * q0[live] + 0.001 * uniform
    v /= (C.T @ (C @ v))
    k = nv - n_rows
    mu = 1e-4
    mu_stop = 0.5 * target * math.log(2) / max(k, 1)
    ln2 = math.log(2)

    def unpack(v):
        q = q0.copy()
        q[live] = v
        return q

    def info_nats(v):
        W = (J @ v).reshape(n_x, n_y)
        r = px @ W
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(W > 0, W * np.log(W / r[None, :]), 0.0)
        return float(px @ t.sum(axis=1)), W, r

    def phi(v, mu):
        return info_nats(v)[0] - mu * float(np.log(v).sum())

    used = 0
    while used < max_newton:
        for _ in range(60):
            used += 1
            f, W, r = info_nats(v)
            with np.errstate(divide="ignore", invalid="ignore"):
                G = np.where(W > 0, np.log(W / r[None, :]), 0.0)
            grad = (px[:, None] * G).ravel()[wi] * pe[ei]
            # Frank-Wolfe gap (grad already carries the p(x) p(e) weights)
            per = np.zeros(n_rows)
            np.add.at(per, row_of, v * grad)
            mins = np.full(n_rows, np.inf)
            np.minimum.at(mins, row_of, grad)
            fw = float(np.sum(per - mins))
            if fw / ln2 <= target:
                return unpack(v)
            # Hessian of I in W, block per output y
            with np.errstate(divide="ignore", invalid="ignore"):
                diag = np.where(W > 0, px[:, None] / W, 0.0)
                cross = np.where(r > 0, 1.0 / r, 0.0)
            HW = np.zeros((n_x * n_y, n_x * n_y))
            for y in range(n_y):
                idx = np.arange(n_x) * n_y + y
                HW[np.ix_(idx, idx)] = np.diag(diag[:, y]) - cross[y] * np.outer(px, px)
            H = J.T @ HW @ J
            g = grad - mu / v
            Hs = v[:, None] * H * v[None, :] + mu * np.eye(nv)
            gs = g * v
            A = C * v[None, :]
            kkt = np.zeros((nv + n_rows, nv + n_rows))
            kkt[:nv, :nv] = Hs
            kkt[:nv, nv:] = A.T
            kkt[nv:, :nv] = A
            rhs = np.concatenate([-gs, np.zeros(n_rows)])
            try:
                u = np.linalg.solve(kkt, rhs)[:nv]
            except np.linalg.LinAlgError:
                try:
                    u = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:nv]
                except np.linalg.LinAlgError:
                    return None
            dec = float(-gs @ u)
            if not np.isfinite(dec):
                return None
            if dec <= 1e-30:
                break
            d = v * u
            t = 1.0
            neg = u < 0
            if neg.any():
                t = min(1.0, 0.95 / float(np.max(-u[neg])))
            f0 = phi(v, mu)
            if dec > 1e-15 * max(1.0, abs(f0)):
                while t > 1e-14:
                    trial = v + t * d
                    if np.all(trial > 0) and phi(trial, mu) <= f0 - 0.25 * t * dec:
                        break
                    t *= 0.5
                else:
                    break
            else:
                trial = v + t * d
            v = trial / (C.T @ (C @ trial))
        if mu <= mu_stop:
            break
        mu = max(0.1 * mu, mu_stop)
    return unpack(v)


def solve_I0_emu(p_x: FiniteDistribution, p_e: FiniteDistribution, tol: float = 1e-10,
                 max_iter: int = MAX_ITER, record_history: bool = False) -> ZeroBatterySolution:
    """Minimum ``I(X;Y)`` over kernels ``q(y|x,e)`` with ``0 <= x - y <= e``.

    The leakage is convex in ``q`` because the channel the utility sees,
    ``W(y|x) = sum_e p(e) q(y|x,e)``, is linear in ``q``.  The solver
    alternates two steps on ``sum_x p(x) D(W(.|x) || r)``:

    * ``r`` becomes the output marginal (exact minimization);
    * for each input level ``x`` the rows ``q(.|x,e)`` take an
      exponentiated-gradient step ``q <- q * (r / W)**step`` towards the
      I-projection of ``r``, with a per-level step size that doubles on
      success and halves until the divergence decreases.

    With a single harvest state and ``step = 1`` this is exactly a
    Blahut-Arimoto update.  Every few hundred steps a log-barrier Newton
    solve is tried from the current kernel and adopted when it lowers
    both the objective and the gap; this rescues degenerate instances on
    which the multiplicative steps crawl.  Iteration stops when the
    Frank-Wolfe gap, an upper bound on ``value - minimum``, drops below
    ``tol`` bits (for the barrier solution, whose bound then also covers
    the running kernel if that one is lower), or when
    the relative decrease of the objective falls under ``1e-10`` at a gap
    no larger than ``1e-7``.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    px, pe = p_x.mass, p_e.mass
    mask = state_feasibility_mask(p_x.alphabet, p_e.alphabet)
    q = mask / mask.sum(axis=2, keepdims=True)
    weight = px[:, None] * pe[None, :]
    active = px > 0
    step = np.ones(len(px))

    def log_ratio(W, r):
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.log2(W / r[None, :])
        # entries no state reaches carry no mass
        return np.where(np.isfinite(g), g, 0.0)

    def fw_gap(q, g):
        g3 = np.broadcast_to(g[:, None, :], q.shape)
        inner = (q * g3).sum(axis=2) - np.where(mask, g3, np.inf).min(axis=2)
        return float(np.sum(weight * inner))

    W = _induced(q, pe)
    f = kernel_information(px, W)
    history = [f] if record_history else []
    it = 0
    while True:
        r = px @ W
        g = log_ratio(W, r)
        gap = fw_gap(q, g)
        if gap <= tol:
            break
        if it >= max_iter:
            raise NonConvergenceError(
                f"zero-battery solver hit {max_iter} steps with gap {gap:.3e}",
                iterate=q, iterations=it, gap=gap,
            )
        it += 1
        # row minimum subtracted before exponentiating; rows renormalize anyway
        g3 = np.where(mask, g[:, None, :], np.inf)
        g3 = np.where(mask, g3 - g3.min(axis=2, keepdims=True), 0.0)
        div = _row_divergence(W, r)
        q_new = q.copy()
        for i in np.flatnonzero(active):
            while step[i] >= MIN_STEP:
                trial = np.where(mask[i], q[i] * np.exp2(-step[i] * g3[i]), 0.0)
                trial /= trial.sum(axis=1, keepdims=True)
                W_i = pe @ trial
                if _row_divergence(W_i[None, :], r)[0] < div[i]:
                    q_new[i] = trial
                    step[i] = min(2.0 * step[i], MAX_STEP)
                    break
                step[i] *= 0.5
            else:
                step[i] = MIN_STEP
        f_old = f
        q = q_new
        W = _induced(q, pe)
        f = kernel_information(px, W)
        stalled = f_old - f <= REL_TOL * f_old
        if stalled or it % BARRIER_EVERY == 0:
            cand = _barrier_solve(px, pe, mask, q, tol)
            if cand is not None:
                W_c = _induced(cand, pe)
                f_c = kernel_information(px, W_c)
                gap_c = fw_gap(cand, log_ratio(W_c, px @ W_c))
                if gap_c <= tol:
                    # the certificate also covers any iterate with a lower objective
                    if f_c <= f:
                        q, W, f = cand, W_c, f_c
                    if record_history:
                        history.append(f)
                    gap = gap_c
                    break
                # kept only if it does not undo the monotone descent
                if f_c <= f + 1e-15 and gap_c < fw_gap(q, log_ratio(W, px @ W)):
                    q, W, f = cand, W_c, f_c
                    stalled = False
        if record_history:
            history.append(f)
        if stalled:
            gap = fw_gap(q, log_ratio(W, px @ W))
            if gap <= STALL_GAP:
                break
            step[:] = np.maximum(step, 1.0)

    kernel = PolicyKernel(p_x.alphabet, p_x.alphabet, q, p_e.alphabet)
    return ZeroBatterySolution(
        value=f,
        kernel=kernel,
        variant="emu-only",
        iterations=it,
        converged=True,
        gap=max(gap, 0.0),
        history=tuple(history),
    )


def solve_I0_up(p_x: FiniteDistribution, p_e: FiniteDistribution,
                tol: float = 1e-11) -> ZeroBatterySolution:
    """Minimum ``I(X;Y|E)``: the ``p_e``-weighted average of peak-only leakages.

    The kernel stacks, for every harvest state ``e``, the optimal
    kernel of the peak-only problem with peak ``e``.
    """
    n_x = len(p_x)
    q = np.zeros((n_x, len(p_e), n_x))
    value = 0.0
    iterations = 0
    gap = 0.0
    for k, (e, w) in enumerate(zip(p_e.alphabet, p_e.mass)):
        sol = solve_peak_only(p_x, e, tol)
        q[:, k, :] = sol.kernel.matrix
        value += w * sol.value
        iterations += sol.iterations
        gap = max(gap, sol.gap)
    kernel = PolicyKernel(p_x.alphabet, p_x.alphabet, q, p_e.alphabet)
    return ZeroBatterySolution(value, kernel, "up-known", iterations, True, gap)


def brute_force_I0(p_x: FiniteDistribution, p_e: FiniteDistribution,
                   grid_step: float = 1e-3) -> float:
    """Grid minimum of ``I(X;Y)`` over feasible state-dependent kernels.

    Only for ``|X| * |E| <= 6``; each ``(x, e)`` row ranges over a simplex
    grid of spacing ``grid_step`` on its feasible outputs.
    """
    if len(p_x) * len(p_e) > 6:
        raise InstanceTooLargeError("brute force is limited to |X| * |E| <= 6")
    if grid_step < 1e-3:
        raise InstanceTooLargeError("grid_step must be at least 1e-3")
    steps = int(round(1.0 / grid_step))
    n_x, n_e = len(p_x), len(p_e)
    mask = state_feasibility_mask(p_x.alphabet, p_e.alphabet).reshape(n_x * n_e, n_x)
    px, pe = p_x.mass, p_e.mass

    def objective(rows):
        q = rows.reshape(len(rows), n_x, n_e, n_x)
        W = np.einsum("k,mikj->mij", pe, q)
        return batch_information(px, W)

    value, _ = kernel_grid_min(mask, steps, objective)
    return value
