"""Gauss-Newton SQP with full condensing and the modified real-time iteration loop.

The solver only talks to a problem object exposing::

    horizon, n_x, n_u, x0, lower, upper, input_scale
    simulate(X, U, sensitivities=True) -> (X_next, A, B)   # per shooting node
    residuals(X, U) -> (r, Jx, Ju)                        # r: (N+1, n_r)
    state_difference(a, b), state_add(x, dx)
    warm_start(X, U) -> (X, U)                            # optional

Inputs are scaled by ``input_scale`` inside the QP so that its Hessian is
well conditioned regardless of the physical units of the inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .dynamics import DynamicsError, rot_z, wrap_angle
from .qp import QpSolution, QpSubproblem, qp_solve, regularize

NX_VEHICLE = 12


class CondensingError(ValueError):
    pass


@dataclass
class Linearization:
    X: NDArray
    U: NDArray
    x_next: NDArray    # f(X_k, U_k), (N, n_x)
    A: NDArray         # (N, n_x, n_x)
    B: NDArray         # (N, n_x, n_u)
    defects: NDArray   # f(X_k, U_k) - X_{k+1}
    init_gap: NDArray  # x0 - X_0
    r: NDArray
    Jx: NDArray
    Ju: NDArray

    @property
    def objective(self) -> float:
        return 0.5 * float(np.sum(self.r**2))

    @property
    def finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.A, self.B, self.defects, self.init_gap, self.r, self.Jx, self.Ju))


@dataclass
class Trajectory:
    """States (N+1, n_x) and inputs (N, n_u) plus solver warm-start data."""

    X: NDArray
    U: NDArray
    active: NDArray | None = None
    _lin: Linearization | None = field(default=None, repr=False, compare=False)
    _lin_owner: int | None = field(default=None, repr=False, compare=False)

    def copy(self) -> Trajectory:
        return Trajectory(self.X.copy(), self.U.copy(),
                          None if self.active is None else self.active.copy())


@dataclass
class SolverStatus:
    kkt_tolerance: float
    sqp_iterations: int = 0
    cpu_time: float = 0.0
    objective: float = float("nan")
    used_fallback: bool = False


@dataclass
class Budget:
    sample_time: float = 0.05
    initial_kkt: float = 1e-3
    running_kkt: float = 10.0
    # Test mode: replace the wall-clock budget with a fixed SQP-iteration cap.
    max_sqp_iters: int | None = None
    max_initial_iters: int = 100

    def __post_init__(self):
        if self.sample_time <= 0 or self.initial_kkt <= 0 or self.running_kkt <= 0:
            raise ValueError("budget values must be positive")


def linearize(problem, traj: Trajectory) -> Linearization:
    if traj._lin is not None and traj._lin_owner == id(problem):
        return traj._lin
    X, U = traj.X, traj.U
    x_next, A, B = problem.simulate(X[:-1], U, sensitivities=True)
    defects = problem.state_difference(x_next, X[1:])
    init_gap = problem.state_difference(problem.x0, X[0])
    r, Jx, Ju = problem.residuals(X, U)
    lin = Linearization(X, U, x_next, A, B, defects, init_gap, r, Jx, Ju)
    traj._lin, traj._lin_owner = lin, id(problem)
    return lin


def initial_guess(problem, inputs: NDArray | None = None) -> Trajectory:
    """Cold start: every node holds x0, constant inputs (hover if available).

    A rollout from a rotating state can tumble through the attitude guard
    within the horizon; multiple shooting does not need a consistent guess.
    """
    N = problem.horizon
    if inputs is None:
        inputs = problem.hover_inputs() if hasattr(problem, "hover_inputs") else np.zeros(problem.n_u)
    U = np.tile(np.asarray(inputs, dtype=float), (N, 1))
    X = np.tile(np.asarray(problem.x0, dtype=float), (N + 1, 1))
    return Trajectory(X, U)


def condense(problem, lin: Linearization) -> QpSubproblem:
    """Eliminate the state steps through the linearized dynamics.

    Returns the QP in the scaled input step z = du / input_scale, together with
    the affine map z -> dx used to recover the state steps.
    """
    if not lin.finite:
        raise CondensingError("non-finite linearization")
    N, n_x, n_u = problem.horizon, problem.n_x, problem.n_u
    nz = N * n_u
    G = np.zeros((N + 1, n_x, nz))
    e = np.zeros((N + 1, n_x))
    e[0] = lin.init_gap
    for k in range(N):
        cols = k * n_u
        if cols:
            G[k + 1, :, :cols] = lin.A[k] @ G[k, :, :cols]
        G[k + 1, :, cols:cols + n_u] = lin.B[k]
        e[k + 1] = lin.A[k] @ e[k] + lin.defects[k]

    n_r = lin.r.shape[1]
    J = np.einsum("kri,kiz->krz", lin.Jx, G)
    for k in range(N):
        J[k, :, k * n_u:(k + 1) * n_u] += lin.Ju[k]
    r0 = lin.r + np.einsum("kri,ki->kr", lin.Jx, e)
    scale = np.tile(problem.input_scale, N)
    Jz = J.reshape((N + 1) * n_r, nz) * scale
    r0 = r0.reshape(-1)
    H, shift = regularize(Jz.T @ Jz)
    lower = (np.asarray(problem.lower)[None] - lin.U).reshape(-1) / scale
    upper = (np.asarray(problem.upper)[None] - lin.U).reshape(-1) / scale
    qp = QpSubproblem(
        hessian=H, gradient=Jz.T @ r0, lower=lower, upper=upper,
        state_map=G.reshape((N + 1) * n_x, nz) * scale, state_offset=e.reshape(-1),
        levenberg_shift=shift, constant=0.5 * float(r0 @ r0),
    )
    if not (np.all(np.isfinite(qp.hessian)) and np.all(np.isfinite(qp.gradient))):
        raise CondensingError("non-finite condensed QP")
    return qp


def kkt_from_linearization(problem, lin: Linearization) -> float:
    """Infinity norm of the NLP KKT residual at the linearization point.

    Dynamics multipliers come from the adjoint recursion, which zeroes the
    state part of the Lagrangian gradient exactly; bound multipliers absorb
    the part of the input gradient pointing out of an active bound.
    """
    if not lin.finite:
        return float("inf")
    N = problem.horizon
    gx = np.einsum("kri,kr->ki", lin.Jx, lin.r)
    gu = np.einsum("kri,kr->ki", lin.Ju, lin.r[:N])
    lam = -gx[N]
    red = np.empty_like(gu)
    for k in range(N - 1, -1, -1):
        red[k] = gu[k] - lin.B[k].T @ lam
        lam = lin.A[k].T @ lam - gx[k]
    scale = np.asarray(problem.input_scale, dtype=float)
    red = red * scale
    lb, ub = np.asarray(problem.lower), np.asarray(problem.upper)
    tol = 1e-9 * scale
    at_lower = lin.U <= lb + tol
    at_upper = lin.U >= ub - tol
    stat = np.where(at_lower, np.minimum(red, 0.0), np.where(at_upper, np.maximum(red, 0.0), red))
    bound_violation = np.maximum(np.maximum(lb - lin.U, lin.U - ub), 0.0) / scale
    return float(max(np.max(np.abs(stat)), np.max(np.abs(lin.defects)),
                     np.max(np.abs(lin.init_gap)), np.max(bound_violation)))


def kkt_tolerance(problem, point: Trajectory) -> float:
    try:
        return kkt_from_linearization(problem, linearize(problem, point))
    except DynamicsError:
        return float("inf")


def _shift_active(active: NDArray | None, n_u: int) -> NDArray | None:
    if active is None:
        return None
    shifted = np.concatenate([active[n_u:], active[-n_u:]])
    return shifted


def sqp_step(problem, guess: Trajectory, qp_max_iters: int | None = None) -> tuple[Trajectory, SolverStatus]:
    """One full-step Gauss-Newton iteration; on failure the guess is returned unchanged."""
    t0 = time.perf_counter()
    try:
        lin = linearize(problem, guess)
        qp = condense(problem, lin)
    except (DynamicsError, CondensingError, np.linalg.LinAlgError, ValueError):
        return guess, SolverStatus(float("inf"), 1, time.perf_counter() - t0, float("nan"), True)

    sol = qp_solve(qp, max_iters=qp_max_iters, active0=guess.active)
    if not sol.feasible:
        return guess, SolverStatus(kkt_from_linearization(problem, lin), 1,
                                   time.perf_counter() - t0, lin.objective, True)

    N, n_x, n_u = problem.horizon, problem.n_x, problem.n_u
    du = (sol.x.reshape(N, n_u) * problem.input_scale)
    dx = (qp.state_map @ sol.x + qp.state_offset).reshape(N + 1, n_x)
    U = np.clip(lin.U + du, problem.lower, problem.upper)
    # Snap inputs the QP left on a bound exactly onto it.
    act = sol.active.reshape(N, n_u)
    U = np.where(act == -1, problem.lower, np.where(act == 1, problem.upper, U))
    X = problem.state_add(lin.X, dx)
    new = Trajectory(X, U, sol.active.copy())
    try:
        new_lin = linearize(problem, new)
        kkt, obj = kkt_from_linearization(problem, new_lin), new_lin.objective
    except DynamicsError:
        return guess, SolverStatus(float("inf"), 1, time.perf_counter() - t0, lin.objective, True)
    if not np.isfinite(kkt):
        return guess, SolverStatus(kkt, 1, time.perf_counter() - t0, lin.objective, True)
    return new, SolverStatus(kkt, 1, time.perf_counter() - t0, obj, False)


def shift_and_transform(X: NDArray, U: NDArray, predicted_motion=None):
    """Warm start for the next sample.

    Drops stage 0 and repeats the last stage. ``predicted_motion`` holds one
    (displacement, yaw increment) pair per vehicle, both in the old {mi}; each
    vehicle's positions, velocities and yaw are re-expressed in the new {mi}
    located at that predicted pose.
    """
    Xs = np.concatenate([X[1:], X[-1:]]).copy()
    Us = np.concatenate([U[1:], U[-1:]]).copy()
    if predicted_motion is None:
        return Xs, Us
    n = len(predicted_motion)
    Xv = Xs.reshape(Xs.shape[0], n, NX_VEHICLE)
    for v, (dp, dpsi) in enumerate(predicted_motion):
        Rt = rot_z(-dpsi)
        Xv[:, v, 0:3] = (Xv[:, v, 0:3] - np.asarray(dp, dtype=float)) @ Rt.T
        Xv[:, v, 3:6] = Xv[:, v, 3:6] @ Rt.T
        Xv[:, v, 8] = wrap_angle(Xv[:, v, 8] - dpsi)
    return Xv.reshape(Xs.shape), Us


def _warm(problem, traj: Trajectory) -> Trajectory:
    if hasattr(problem, "warm_start"):
        X, U = problem.warm_start(traj.X, traj.U)
    else:
        X, U = shift_and_transform(traj.X, traj.U)
    return Trajectory(X, U, _shift_active(traj.active, problem.n_u))


def rti_control_step(
    problem,
    guess: Trajectory,
    budget: Budget | None = None,
    is_first: bool = False,
) -> tuple[NDArray, Trajectory, SolverStatus]:
    """Modified RTI: iterate SQP within the budget, apply stage-0 input, warm start.

    First call iterates until the initial KKT threshold (capped by
    ``max_initial_iters``). Later calls stop when the running threshold is met
    or the sample time (or test-mode iteration cap) is used up, always
    performing at least one step. An infeasible QP keeps the last accepted
    iterate and applies its first input.
    """
    budget = budget or Budget()
    t0 = time.perf_counter()
    current = guess
    iters = 0
    fallback = False
    kkt = float("inf")
    objective = float("nan")
    while True:
        new, st = sqp_step(problem, current)
        iters += 1
        if st.used_fallback:
            fallback = True
            break
        current, kkt, objective = new, st.kkt_tolerance, st.objective
        if is_first:
            if kkt <= budget.initial_kkt or iters >= budget.max_initial_iters:
                break
            continue
        if kkt <= budget.running_kkt:
            break
        if budget.max_sqp_iters is not None:
            if iters >= budget.max_sqp_iters:
                break
        elif time.perf_counter() - t0 > budget.sample_time:
            break
    if fallback and current is guess:
        kkt = kkt_tolerance(problem, current)
        lin = current._lin
        objective = lin.objective if lin is not None else float("nan")
    applied = np.array(current.U[0], copy=True)
    warm = _warm(problem, current)
    status = SolverStatus(kkt, iters, time.perf_counter() - t0, objective, fallback)
    return applied, warm, status
