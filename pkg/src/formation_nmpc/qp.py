"""Dense box-constrained convex QP solved with a primal active-set method.

    minimize  0.5 x'Hx + g'x   subject to  lb <= x <= ub
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, eigvalsh, LinAlgError

LEVENBERG_FLOOR = 1e-8


@dataclass
class QpSubproblem:
    hessian: NDArray
    gradient: NDArray
    lower: NDArray
    upper: NDArray
    # Maps from the input step to the state step: dx = state_map @ du + state_offset.
    state_map: NDArray | None = None
    state_offset: NDArray | None = None
    levenberg_shift: float = 0.0
    constant: float = 0.0

    @property
    def n(self) -> int:
        return self.gradient.size

    def objective(self, x) -> float:
        return float(0.5 * x @ self.hessian @ x + self.gradient @ x + self.constant)


@dataclass
class QpSolution:
    x: NDArray
    active: NDArray                 # -1 at lower bound, +1 at upper bound, 0 free
    feasible: bool
    iterations: int
    multipliers: NDArray = field(default_factory=lambda: np.zeros(0))
    states: NDArray | None = None


def regularize(H: NDArray, floor: float = LEVENBERG_FLOOR) -> tuple[NDArray, float]:
    """Symmetrize and shift H so that its smallest eigenvalue is at least ``floor``."""
    H = 0.5 * (H + H.T)
    lam_min = eigvalsh(H, subset_by_index=[0, 0])[0]
    shift = max(0.0, floor - lam_min)
    if shift > 0.0:
        H = H + shift * np.eye(H.shape[0])
    return H, shift


def _infeasible(n: int, it: int, x=None) -> QpSolution:
    x = np.zeros(n) if x is None else x
    return QpSolution(x, np.zeros(n, dtype=int), False, it, np.zeros(n))


def qp_solve(
    qp: QpSubproblem,
    max_iters: int | None = None,
    x0: NDArray | None = None,
    active0: NDArray | None = None,
    tol: float = 1e-10,
) -> QpSolution:
    """Primal active-set solve; never raises, reports ``feasible=False`` instead.

    ``x0``/``active0`` warm-start the iterate and working set. The default
    iteration cap allows every bound to enter and leave the working set a few
    times.
    """
    H, g, lb, ub = qp.hessian, qp.gradient, qp.lower, qp.upper
    n = g.size
    if max_iters is None:
        max_iters = 4 * n + 50
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))
            and np.all(np.isfinite(lb)) and np.all(np.isfinite(ub))):
        return _infeasible(n, 0)
    if np.any(lb > ub):
        return _infeasible(n, 0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    x = np.clip(x, lb, ub)
    active = np.zeros(n, dtype=int)
    if active0 is not None:
        active[:] = active0
    active[(active == -1) & (x > lb)] = 0
    active[(active == 1) & (x < ub)] = 0
    x[active == -1] = lb[active == -1]
    x[active == 1] = ub[active == 1]

    at_subspace_min = False
    for it in range(1, max_iters + 1):
        grad = H @ x + g
        free = active == 0
        if not at_subspace_min:
            p = np.zeros(n)
            if free.any():
                try:
                    fac = cho_factor(H[np.ix_(free, free)], check_finite=False)
                except LinAlgError:
                    return _infeasible(n, it, x)
                p[free] = -cho_solve(fac, grad[free], check_finite=False)
            if not np.all(np.isfinite(p)):
                return _infeasible(n, it, x)
            step_scale = max(1.0, np.max(np.abs(x)))
            at_subspace_min = np.max(np.abs(p)) <= 1e-14 * step_scale

        if at_subspace_min:
            mult = np.where(active == -1, grad, np.where(active == 1, -grad, 0.0))
            worst = int(np.argmin(mult))
            if mult[worst] >= -tol * max(1.0, np.max(np.abs(g))):
                return QpSolution(x, active, True, it, mult)
            active[worst] = 0
            at_subspace_min = False
            continue

        alpha, blocking, side = 1.0, -1, 0
        neg = free & (p < 0)
        pos = free & (p > 0)
        if neg.any():
            ratios = (lb[neg] - x[neg]) / p[neg]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, blocking, side = ratios[k], int(np.flatnonzero(neg)[k]), -1
        if pos.any():
            ratios = (ub[pos] - x[pos]) / p[pos]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, blocking, side = ratios[k], int(np.flatnonzero(pos)[k]), 1
        x = x + max(alpha, 0.0) * p
        x = np.clip(x, lb, ub)
        if blocking >= 0:
            active[blocking] = side
            x[blocking] = lb[blocking] if side == -1 else ub[blocking]
            at_subspace_min = False
        else:
            at_subspace_min = True
    return _infeasible(n, max_iters, x)


def qp_kkt_residual(qp: QpSubproblem, sol: QpSolution) -> float:
    """Infinity norm of stationarity, complementarity and bound violation."""
    grad = qp.hessian @ sol.x + qp.gradient
    lower_mult = np.where(sol.active == -1, grad, 0.0)
    upper_mult = np.where(sol.active == 1, -grad, 0.0)
    stationarity = grad - lower_mult + upper_mult
    dual = np.minimum(lower_mult, 0.0), np.minimum(upper_mult, 0.0)
    compl = (lower_mult * (sol.x - qp.lower), upper_mult * (qp.upper - sol.x))
    bounds = np.maximum(qp.lower - sol.x, 0.0), np.maximum(sol.x - qp.upper, 0.0)
    parts = [stationarity, *dual, *compl, *bounds]
    return float(max(np.max(np.abs(v)) if v.size else 0.0 for v in parts))
