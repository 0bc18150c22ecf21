"""Joint multi-vehicle optimal control problem in local MPC frames.

Decision variables are squared rotor speeds (4 per vehicle per stage); states
are the 12-dim vehicle states stacked vehicle-major, each in its own {mi}.
The cost is a Gauss-Newton least-squares sum 0.5*||r_k||^2 over stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .dynamics import EUL, ParamArrays, VehicleParams, rk4_batch, wrap_angle
from .frames import (
    AttitudePartial,
    FramePose,
    RelativeMeasurement,
    displacement_from_measurement,
    relative_yaw_estimate,
)

NX = 12
NU = 4


class AssemblyError(ValueError):
    pass


class SensingGapError(KeyError):
    pass


@dataclass(frozen=True)
class FormationGraph:
    """Ordered (observer, target) pairs with desired target position in the
    observer's control frame."""

    pairs: tuple[tuple[int, int], ...]
    desired: NDArray  # (P, 3)

    def __post_init__(self):
        desired = np.asarray(self.desired, dtype=float).reshape(len(self.pairs), 3)
        object.__setattr__(self, "desired", desired)
        index = {pair: k for k, pair in enumerate(self.pairs)}
        for (i, j), d in zip(self.pairs, desired):
            if (j, i) not in index:
                raise ValueError(f"formation graph lacks reverse edge of {(i, j)}")
            if not np.allclose(desired[index[(j, i)]], -d, atol=1e-12):
                raise ValueError(f"desired displacements of {(i, j)} and {(j, i)} disagree")

    @classmethod
    def bidirectional(cls, edges: dict[tuple[int, int], object]) -> FormationGraph:
        """Build both directions from one desired displacement per edge.

        The reverse reference is the negated vector, which holds at the
        yaw-aligned rigid configuration the formation converges to.
        """
        pairs, desired = [], []
        for (obs, tgt), d in edges.items():
            d = np.asarray(d, dtype=float)
            pairs += [(obs, tgt), (tgt, obs)]
            desired += [d, -d]
        return cls(tuple(pairs), np.array(desired))

    def with_desired(self, edges: dict[tuple[int, int], object]) -> FormationGraph:
        """Same pair ordering, new references."""
        other = FormationGraph.bidirectional(edges)
        lookup = dict(zip(other.pairs, other.desired))
        return FormationGraph(self.pairs, np.array([lookup[p] for p in self.pairs]))


@dataclass(frozen=True)
class Weights:
    formation: float = 10.0
    position: float = 1.0
    yaw: float = 1.0
    force: float = 1.0
    torque: float = 100.0
    input_scale: float = 0.05

    def __post_init__(self):
        if min(self.formation, self.position, self.yaw, self.force, self.torque,
               self.input_scale) < 0:
            raise ValueError("weights must be nonnegative")


@dataclass(frozen=True)
class FrameData:
    """Inter-frame geometry measured at horizon start.

    rel_yaw[i, j] is the yaw of {mi_j} relative to {mi_i}; offsets[i, j] is the
    origin of {mi_j} expressed in {mi_i}.
    """

    rel_yaw: NDArray
    offsets: NDArray
    leader_frame: FramePose


@dataclass(frozen=True)
class StageReference:
    desired: NDArray          # (P, 3) formation references for this stage
    leader_position: NDArray  # (3,) earth frame
    leader_yaw: float


def residual_size(n_pairs: int, n_vehicles: int) -> int:
    return 3 * n_pairs + 4 + 6 * n_vehicles


def _thrust_axis(euler: NDArray, with_jacobian: bool = True):
    """Third column of the Z-Y-X rotation and its derivative w.r.t. the angles."""
    phi, th, psi = euler[..., 0], euler[..., 1], euler[..., 2]
    sf, cf, st, ct, sp, cp = np.sin(phi), np.cos(phi), np.sin(th), np.cos(th), np.sin(psi), np.cos(psi)
    r3 = np.stack([cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct], axis=-1)
    if not with_jacobian:
        return r3
    d_phi = np.stack([-sf * st * cp + cf * sp, -sf * st * sp - cf * cp, -sf * ct], axis=-1)
    d_th = np.stack([cf * ct * cp, cf * ct * sp, -cf * st], axis=-1)
    d_psi = np.stack([-cf * st * sp + sf * cp, cf * st * cp + sf * sp, np.zeros_like(phi)], axis=-1)
    return r3, np.stack([d_phi, d_th, d_psi], axis=-1)


def _rz_batch(a: NDArray) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def batched_residuals(
    X: NDArray,
    U: NDArray,
    desired: NDArray,
    leader_position: NDArray,
    leader_yaw: NDArray,
    has_inputs: NDArray,
    graph: FormationGraph,
    weights: Weights,
    frames: FrameData,
    params: ParamArrays,
    leader: int = 0,
):
    """Residuals and Jacobians for S stages at once.

    X (S, n, 12), U (S, n, 4), desired (S, P, 3), leader_position (S, 3),
    leader_yaw (S,), has_inputs (S,) bool. Stages without inputs (terminal)
    get zero input rows. Returns r (S, n_r), Jx (S, n_r, 12n), Ju (S, n_r, 4n).
    """
    S, n, _ = X.shape
    P = len(graph.pairs)
    n_r = residual_size(P, n)
    r = np.zeros((S, n_r))
    Jx = np.zeros((S, n_r, n, NX))
    Ju = np.zeros((S, n_r, n, NU))

    sf = np.sqrt(weights.formation)
    for k, (i, j) in enumerate(graph.pairs):
        rows = slice(3 * k, 3 * k + 3)
        Rij = _rz_batch(np.asarray(frames.rel_yaw[i, j]))
        q = X[:, j, 0:3] @ Rij.T + frames.offsets[i, j] - X[:, i, 0:3]
        psi = X[:, i, 8]
        c, s = np.cos(psi), np.sin(psi)
        Rm = _rz_batch(-psi)
        y = np.einsum("sab,sb->sa", Rm, q)
        r[:, rows] = sf * (desired[:, k] - y)
        Jx[:, rows, i, 0:3] = sf * Rm
        Jx[:, rows, j, 0:3] = -sf * (Rm @ Rij)
        dy = -np.stack([s * q[:, 0] - c * q[:, 1], c * q[:, 0] + s * q[:, 1], np.zeros(S)], axis=1)
        Jx[:, rows, i, 8] = -sf * dy

    base = 3 * P
    sx, st = np.sqrt(weights.position), np.sqrt(weights.yaw)
    lf = frames.leader_frame
    Rl = _rz_batch(np.asarray(lf.yaw_offset))
    r[:, base:base + 3] = sx * (leader_position - X[:, leader, 0:3] @ Rl.T - lf.origin_offset)
    Jx[:, base:base + 3, leader, 0:3] = -sx * Rl
    r[:, base + 3] = st * wrap_angle(leader_yaw - X[:, leader, 8] - lf.yaw_offset)
    Jx[:, base + 3, leader, 8] = -st

    base += 4
    sF = np.sqrt(weights.force * weights.input_scale)
    sT = np.sqrt(weights.torque * weights.input_scale)
    mask = has_inputs.astype(float)[:, None]
    for v in range(n):
        rowsF = slice(base + 6 * v, base + 6 * v + 3)
        rowsT = slice(base + 6 * v + 3, base + 6 * v + 6)
        mix = params.mix[v]
        thrust = U[:, v] @ mix[0]
        r3, dr3 = _thrust_axis(X[:, v, EUL])
        force = -thrust[:, None] * r3
        force[:, 2] += params.mass[v] * params.gravity[v]
        r[:, rowsF] = sF * force * mask
        Jx[:, rowsF, v, 6:9] = -sF * thrust[:, None, None] * dr3 * mask[:, :, None]
        Ju[:, rowsF, v, :] = -sF * r3[:, :, None] * mix[0][None, None, :] * mask[:, :, None]
        r[:, rowsT] = sT * (U[:, v] @ mix[1:].T) * mask
        Ju[:, rowsT, v, :] = sT * mix[1:][None] * mask[:, :, None]
    return r, Jx.reshape(S, n_r, n * NX), Ju.reshape(S, n_r, n * NU)


def stage_residuals(
    stage_states,
    stage_inputs,
    reference: StageReference,
    graph: FormationGraph,
    weights: Weights,
    frames: FrameData,
    params: list[VehicleParams],
):
    """Weighted residual of one stage and its Jacobians.

    ``stage_inputs=None`` evaluates the terminal residual, which omits the
    force and torque blocks (Ju is then None).
    """
    X = np.asarray(stage_states, dtype=float)
    n = len(params)
    if X.shape != (n, NX):
        raise AssemblyError(f"stage states must be ({n}, {NX}), got {X.shape}")
    terminal = stage_inputs is None
    U = np.zeros((n, NU)) if terminal else np.asarray(stage_inputs, dtype=float)
    if U.shape != (n, NU):
        raise AssemblyError(f"stage inputs must be ({n}, {NU}), got {U.shape}")
    desired = np.asarray(reference.desired, dtype=float)
    if desired.shape != (len(graph.pairs), 3):
        raise AssemblyError("formation references do not match the graph")
    r, Jx, Ju = batched_residuals(
        X[None], U[None], desired[None], np.asarray(reference.leader_position, dtype=float)[None],
        np.array([reference.leader_yaw]), np.array([not terminal]), graph, weights, frames,
        ParamArrays.stack(params),
    )
    if terminal:
        keep = 3 * len(graph.pairs) + 4
        return r[0, :keep], Jx[0, :keep], None
    return r[0], Jx[0], Ju[0]


def block_diag_batch(blocks: NDArray) -> NDArray:
    """(S, n, a, b) -> (S, n*a, n*b) block-diagonal."""
    S, n, a, b = blocks.shape
    out = np.zeros((S, n, a, n, b))
    idx = np.arange(n)
    out[:, idx, :, idx, :] = blocks.transpose(1, 0, 2, 3)
    return out.reshape(S, n * a, n * b)


def stacked_dynamics_step(stacked_state, stacked_input, params_list: list[VehicleParams], dt: float):
    """Advance all vehicles one RK4 step; returns (x_next, dx_next/dx, dx_next/du)."""
    n = len(params_list)
    x = np.asarray(stacked_state, dtype=float).reshape(n, NX)
    u = np.asarray(stacked_input, dtype=float).reshape(n, NU)
    xn, A, B = rk4_batch(x, u, ParamArrays.stack(params_list), dt, sensitivities=True)
    return xn.reshape(-1), block_diag_batch(A[None])[0], block_diag_batch(B[None])[0]


@dataclass
class HorizonProblem:
    """Stacked multi-vehicle OCP over ``horizon`` stages (vehicle 0 leads)."""

    x0: NDArray
    params: list[VehicleParams]
    graph: FormationGraph
    frames: FrameData
    desired: NDArray             # (N+1, P, 3)
    leader_ref_position: NDArray  # (N+1, 3)
    leader_ref_yaw: NDArray       # (N+1,)
    weights: Weights = field(default_factory=Weights)
    horizon: int = 15
    dt: float = 0.05

    def __post_init__(self):
        n, N = len(self.params), self.horizon
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (NX * n,):
            raise AssemblyError(f"x0 must have {NX * n} entries, got {self.x0.shape}")
        self.desired = np.asarray(self.desired, dtype=float)
        if self.desired.shape == (len(self.graph.pairs), 3):
            self.desired = np.broadcast_to(self.desired, (N + 1, *self.desired.shape)).copy()
        self.leader_ref_position = np.asarray(self.leader_ref_position, dtype=float)
        self.leader_ref_yaw = np.asarray(self.leader_ref_yaw, dtype=float)
        if (self.desired.shape != (N + 1, len(self.graph.pairs), 3)
                or self.leader_ref_position.shape != (N + 1, 3)
                or self.leader_ref_yaw.shape != (N + 1,)):
            raise AssemblyError("reference arrays must span N+1 stages")
        self._pa = ParamArrays.stack(self.params)
        self._pa_nodes = self._pa.take(np.tile(np.arange(n), N))
        self._has_inputs = np.arange(N + 1) < N

    @property
    def n_vehicles(self) -> int:
        return len(self.params)

    @property
    def n_x(self) -> int:
        return NX * self.n_vehicles

    @property
    def n_u(self) -> int:
        return NU * self.n_vehicles

    @property
    def lower(self) -> NDArray:
        return np.zeros(self.n_u)

    @property
    def upper(self) -> NDArray:
        return np.repeat([p.max_omega_sq for p in self.params], NU)

    @property
    def input_scale(self) -> NDArray:
        return self.upper

    def hover_inputs(self) -> NDArray:
        return np.repeat([p.hover_omega_sq for p in self.params], NU)

    def simulate(self, X: NDArray, U: NDArray, sensitivities: bool = True):
        """Per-node RK4 for X (S, n_x), U (S, n_u) with S <= N."""
        S, n = X.shape[0], self.n_vehicles
        pa = self._pa_nodes if S == self.horizon else self._pa.take(np.tile(np.arange(n), S))
        out = rk4_batch(X.reshape(S * n, NX), U.reshape(S * n, NU), pa, self.dt, sensitivities)
        if not sensitivities:
            return out.reshape(S, self.n_x)
        xn, A, B = out
        return (xn.reshape(S, self.n_x),
                block_diag_batch(A.reshape(S, n, NX, NX)),
                block_diag_batch(B.reshape(S, n, NX, NU)))

    def residuals(self, X: NDArray, U: NDArray):
        N, n = self.horizon, self.n_vehicles
        Uall = np.concatenate([U, np.zeros((1, self.n_u))])
        r, Jx, Ju = batched_residuals(
            X.reshape(N + 1, n, NX), Uall.reshape(N + 1, n, NU), self.desired,
            self.leader_ref_position, self.leader_ref_yaw, self._has_inputs,
            self.graph, self.weights, self.frames, self._pa,
        )
        return r, Jx, Ju[:N]

    def state_difference(self, a: NDArray, b: NDArray) -> NDArray:
        d = np.asarray(a, dtype=float) - b
        shape = d.shape
        d = d.reshape(*shape[:-1], self.n_vehicles, NX)
        d[..., EUL] = wrap_angle(d[..., EUL])
        return d.reshape(shape)

    def state_add(self, x: NDArray, dx: NDArray) -> NDArray:
        out = (np.asarray(x, dtype=float) + dx)
        shape = out.shape
        out = out.reshape(*shape[:-1], self.n_vehicles, NX)
        out[..., EUL] = wrap_angle(out[..., EUL])
        return out.reshape(shape)

    def rollout(self, U: NDArray) -> NDArray:
        """Forward simulation of the prediction model from x0."""
        X = np.empty((self.horizon + 1, self.n_x))
        X[0] = self.x0
        for k in range(self.horizon):
            X[k + 1] = self.simulate(X[k:k + 1], U[k:k + 1], sensitivities=False)[0]
        return X

    def warm_start(self, X: NDArray, U: NDArray):
        """Shift one stage and move every vehicle's {mi} to its predicted pose."""
        from .rti import shift_and_transform

        n = self.n_vehicles
        x1 = X[1].reshape(n, NX)
        motion = [(x1[v, 0:3].copy(), float(x1[v, 8])) for v in range(n)]
        return shift_and_transform(X, U, motion)


@dataclass
class Feedback:
    """Processed sensing available to the central controller at one instant."""

    velocities_body: NDArray                 # (n, 3) optic flow, body frame
    attitudes: list[AttitudePartial]         # IMU roll/pitch
    body_rates: NDArray                      # (n, 3) gyro
    measurements: dict[tuple[int, int], RelativeMeasurement]
    leader_position: NDArray                 # absolute localization unit
    leader_yaw: float


@dataclass
class ReferenceWindow:
    desired: NDArray          # (N+1, P, 3)
    leader_position: NDArray  # (N+1, 3)
    leader_yaw: NDArray       # (N+1,)


def build_horizon_problem(
    feedback: Feedback,
    refs: ReferenceWindow,
    params: list[VehicleParams],
    graph: FormationGraph,
    weights: Weights | None = None,
    horizon: int = 15,
    dt: float = 0.05,
) -> HorizonProblem:
    """Express the current feedback in fresh per-vehicle MPC frames."""
    n = len(params)
    x0 = np.zeros((n, NX))
    tilts = [att.tilt() for att in feedback.attitudes]
    for v in range(n):
        x0[v, 3:6] = tilts[v] @ np.asarray(feedback.velocities_body[v], dtype=float)
        x0[v, 6] = feedback.attitudes[v].roll
        x0[v, 7] = feedback.attitudes[v].pitch
        x0[v, 9:12] = feedback.body_rates[v]

    rel_yaw = np.zeros((n, n))
    offsets = np.zeros((n, n, 3))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            try:
                m_ij, m_ji = feedback.measurements[(i, j)], feedback.measurements[(j, i)]
            except KeyError as exc:
                raise SensingGapError(f"missing relative measurement for pair {(i, j)}") from exc
            offsets[i, j] = tilts[i] @ displacement_from_measurement(m_ij)
            if i < j:
                yaw_i_minus_j = relative_yaw_estimate(m_ij, m_ji, feedback.attitudes[i],
                                                      feedback.attitudes[j])
                rel_yaw[i, j] = -yaw_i_minus_j
                rel_yaw[j, i] = yaw_i_minus_j
    frames = FrameData(rel_yaw, offsets, FramePose(feedback.leader_position, feedback.leader_yaw))
    return HorizonProblem(
        x0=x0.reshape(-1), params=list(params), graph=graph, frames=frames,
        desired=refs.desired, leader_ref_position=refs.leader_position,
        leader_ref_yaw=refs.leader_yaw, weights=weights or Weights(), horizon=horizon, dt=dt,
    )
