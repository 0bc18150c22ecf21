"""Six-DOF quadrotor rigid-body model, propeller mixing and RK4 integration.

Conventions: NED earth frame (z down, gravity along +z), Z-Y-X Euler angles
(roll, pitch, yaw), body z axis down so positive thrust pushes along -z body.

State layout (12,): position (0:3), velocity (3:6), euler (6:9), body rates (9:12).
All batched helpers accept a leading node axis so that every shooting node of
every vehicle can be evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

GRAVITY = 9.81
PITCH_GUARD = np.pi / 2 - 1e-3
RPM_TO_RAD_S = 2.0 * np.pi / 60.0

POS = slice(0, 3)
VEL = slice(3, 6)
EUL = slice(6, 9)
RATES = slice(9, 12)


class DynamicsError(ValueError):
    """Base class for model evaluation failures."""


class MixerDomainError(DynamicsError):
    pass


class InfeasibleWrenchError(DynamicsError):
    pass


class SingularityError(DynamicsError):
    pass


class IntegrationError(DynamicsError):
    pass


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


def rot_x(a: float) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_zyx(euler) -> NDArray:
    """Body-to-earth rotation R = Rz(yaw) Ry(pitch) Rx(roll)."""
    roll, pitch, yaw = euler
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 0.5
    inertia: tuple[float, float, float] = (2.5e-3, 2.5e-3, 5.0e-3)
    arm_length: float = 0.18
    thrust_coeff: float = 0.5 * GRAVITY / (4.0 * (3000.0 * RPM_TO_RAD_S) ** 2)
    torque_coeff: float = 0.016 * 0.5 * GRAVITY / (4.0 * (3000.0 * RPM_TO_RAD_S) ** 2)
    max_prop_speed: float = 6000.0 * RPM_TO_RAD_S
    gravity: float = GRAVITY

    def __post_init__(self):
        values = [self.mass, *self.inertia, self.arm_length, self.thrust_coeff,
                  self.torque_coeff, self.max_prop_speed]
        if not all(np.isfinite(v) and v > 0 for v in values) or self.gravity < 0:
            raise ValueError(f"vehicle parameters must be strictly positive: {self}")

    @property
    def max_omega_sq(self) -> float:
        return self.max_prop_speed**2

    @property
    def hover_omega_sq(self) -> float:
        return self.mass * self.gravity / (4.0 * self.thrust_coeff)

    def mixing_matrix(self) -> NDArray:
        """Map omega^2 -> (thrust magnitude, roll, pitch, yaw torque)."""
        ct, cq, d = self.thrust_coeff, self.torque_coeff, self.arm_length
        return np.array([
            [ct, ct, ct, ct],
            [0.0, d * ct, 0.0, -d * ct],
            [-d * ct, 0.0, d * ct, 0.0],
            [cq, -cq, cq, -cq],
        ])


@dataclass
class VehicleState:
    position: NDArray = field(default_factory=lambda: np.zeros(3))
    velocity: NDArray = field(default_factory=lambda: np.zeros(3))
    euler: NDArray = field(default_factory=lambda: np.zeros(3))
    body_rates: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "velocity", "euler", "body_rates"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector, got shape {value.shape}")
            setattr(self, name, value)

    def to_array(self) -> NDArray:
        return np.concatenate([self.position, self.velocity, self.euler, self.body_rates])

    @classmethod
    def from_array(cls, x) -> VehicleState:
        x = np.asarray(x, dtype=float)
        return cls(x[POS].copy(), x[VEL].copy(), x[EUL].copy(), x[RATES].copy())

    @property
    def yaw(self) -> float:
        return float(self.euler[2])


@dataclass(frozen=True)
class Wrench:
    body_force: NDArray
    body_torque: NDArray

    @property
    def thrust(self) -> float:
        return float(-self.body_force[2])

    @classmethod
    def from_thrust_torque(cls, thrust: float, torque) -> Wrench:
        return cls(np.array([0.0, 0.0, -thrust]), np.asarray(torque, dtype=float))


def _as_omega_sq(omega_sq, params: VehicleParams) -> NDArray:
    omega_sq = np.asarray(omega_sq, dtype=float)
    if omega_sq.shape != (4,):
        raise MixerDomainError(f"expected 4 squared propeller speeds, got shape {omega_sq.shape}")
    tol = 1e-9 * params.max_omega_sq
    for i, w in enumerate(omega_sq):
        if not np.isfinite(w) or w < -tol or w > params.max_omega_sq + tol:
            raise MixerDomainError(
                f"rotor {i + 1}: omega^2={w} outside [0, {params.max_omega_sq}]"
            )
    return omega_sq


def mixer(omega_sq, params: VehicleParams) -> Wrench:
    """Body wrench produced by the four rotors."""
    omega_sq = _as_omega_sq(omega_sq, params)
    thrust, *torque = params.mixing_matrix() @ omega_sq
    return Wrench.from_thrust_torque(thrust, torque)


def inverse_mixer(wrench: Wrench, params: VehicleParams) -> NDArray:
    """Squared propeller speeds realizing ``wrench``.

    Raises InfeasibleWrenchError if any rotor would need a negative omega^2.
    """
    if wrench.body_force[0] != 0.0 or wrench.body_force[1] != 0.0:
        raise InfeasibleWrenchError("a quadrotor cannot produce lateral body force")
    rhs = np.concatenate([[wrench.thrust], wrench.body_torque])
    omega_sq = np.linalg.solve(params.mixing_matrix(), rhs)
    scale = max(abs(rhs[0]) / params.thrust_coeff, 1.0)
    bad = np.flatnonzero(omega_sq < -1e-12 * scale)
    if bad.size:
        raise InfeasibleWrenchError(
            f"wrench needs negative omega^2 on rotor(s) {[int(i) + 1 for i in bad]}: {omega_sq}"
        )
    return np.maximum(omega_sq, 0.0)


# ---------------------------------------------------------------------------
# Batched model used for both plant simulation and prediction.


@dataclass(frozen=True)
class ParamArrays:
    """Vehicle parameters broadcast over a node axis of length M."""

    mass: NDArray        # (M,)
    inertia: NDArray     # (M, 3)
    gravity: NDArray     # (M,)
    mix: NDArray         # (M, 4, 4)

    @classmethod
    def stack(cls, params: list[VehicleParams]) -> ParamArrays:
        return cls(
            mass=np.array([p.mass for p in params]),
            inertia=np.array([p.inertia for p in params], dtype=float),
            gravity=np.array([p.gravity for p in params]),
            mix=np.stack([p.mixing_matrix() for p in params]),
        )

    def take(self, idx) -> ParamArrays:
        return ParamArrays(self.mass[idx], self.inertia[idx], self.gravity[idx], self.mix[idx])


def _check_pitch(x: NDArray) -> None:
    pitch = x[..., 7]
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state encountered")
    if np.any(np.abs(pitch) >= PITCH_GUARD):
        raise SingularityError(f"pitch {pitch} at Euler-rate singularity guard")


def deriv_batch(x: NDArray, u: NDArray, p: ParamArrays, jacobian: bool = False):
    """State derivative for x (M,12), u (M,4); optionally with A (M,12,12), B (M,12,4)."""
    _check_pitch(x)
    M = x.shape[0]
    phi, th, psi = x[:, 6], x[:, 7], x[:, 8]
    w = x[:, 9:12]
    sf, cf = np.sin(phi), np.cos(phi)
    st, ct = np.sin(th), np.cos(th)
    sp, cp = np.sin(psi), np.cos(psi)
    tt = st / ct

    wrench = np.einsum("mij,mj->mi", p.mix, u)
    thrust, tau = wrench[:, 0], wrench[:, 1:]
    r3 = np.stack([cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct], axis=1)
    Ix, Iy, Iz = p.inertia[:, 0], p.inertia[:, 1], p.inertia[:, 2]
    pr, qr, rr = w[:, 0], w[:, 1], w[:, 2]

    f = np.empty((M, 12))
    f[:, 0:3] = x[:, 3:6]
    f[:, 3:6] = -(thrust / p.mass)[:, None] * r3
    f[:, 5] += p.gravity
    f[:, 6] = pr + sf * tt * qr + cf * tt * rr
    f[:, 7] = cf * qr - sf * rr
    f[:, 8] = (sf * qr + cf * rr) / ct
    f[:, 9] = ((Iy - Iz) * qr * rr + tau[:, 0]) / Ix
    f[:, 10] = ((Iz - Ix) * pr * rr + tau[:, 1]) / Iy
    f[:, 11] = ((Ix - Iy) * pr * qr + tau[:, 2]) / Iz
    if not jacobian:
        return f

    A = np.zeros((M, 12, 12))
    A[:, 0, 3] = A[:, 1, 4] = A[:, 2, 5] = 1.0
    dr3 = np.empty((M, 3, 3))  # columns: d/droll, d/dpitch, d/dyaw
    dr3[:, :, 0] = np.stack([-sf * st * cp + cf * sp, -sf * st * sp - cf * cp, -sf * ct], axis=1)
    dr3[:, :, 1] = np.stack([cf * ct * cp, cf * ct * sp, -cf * st], axis=1)
    dr3[:, :, 2] = np.stack([-cf * st * sp + sf * cp, cf * st * cp + sf * sp, np.zeros(M)], axis=1)
    A[:, 3:6, 6:9] = -(thrust / p.mass)[:, None, None] * dr3

    sec2 = 1.0 / ct**2
    A[:, 6, 6] = cf * tt * qr - sf * tt * rr
    A[:, 6, 7] = (sf * qr + cf * rr) * sec2
    A[:, 6, 9] = 1.0
    A[:, 6, 10] = sf * tt
    A[:, 6, 11] = cf * tt
    A[:, 7, 6] = -sf * qr - cf * rr
    A[:, 7, 10] = cf
    A[:, 7, 11] = -sf
    A[:, 8, 6] = (cf * qr - sf * rr) / ct
    A[:, 8, 7] = (sf * qr + cf * rr) * st * sec2
    A[:, 8, 10] = sf / ct
    A[:, 8, 11] = cf / ct

    A[:, 9, 10] = (Iy - Iz) * rr / Ix
    A[:, 9, 11] = (Iy - Iz) * qr / Ix
    A[:, 10, 9] = (Iz - Ix) * rr / Iy
    A[:, 10, 11] = (Iz - Ix) * pr / Iy
    A[:, 11, 9] = (Ix - Iy) * qr / Iz
    A[:, 11, 10] = (Ix - Iy) * pr / Iz

    B = np.zeros((M, 12, 4))
    B[:, 3:6, :] = -(r3 / p.mass[:, None])[:, :, None] * p.mix[:, 0, None, :]
    B[:, 9:12, :] = p.mix[:, 1:, :] / p.inertia[:, :, None]
    return f, A, B


def rk4_batch(x: NDArray, u: NDArray, p: ParamArrays, dt: float, sensitivities: bool = False):
    """One RK4 step per node with zero-order-hold input.

    Euler angles of the result are *not* wrapped; callers that need the
    canonical range wrap explicitly (the solver compares angles modulo 2*pi).
    """
    if not sensitivities:
        k1 = deriv_batch(x, u, p)
        k2 = deriv_batch(x + 0.5 * dt * k1, u, p)
        k3 = deriv_batch(x + 0.5 * dt * k2, u, p)
        k4 = deriv_batch(x + dt * k3, u, p)
        return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    M = x.shape[0]
    eye = np.broadcast_to(np.eye(12), (M, 12, 12))
    k1, A1, B1 = deriv_batch(x, u, p, jacobian=True)
    K1x, K1u = A1, B1
    k2, A2, B2 = deriv_batch(x + 0.5 * dt * k1, u, p, jacobian=True)
    K2x = A2 @ (eye + 0.5 * dt * K1x)
    K2u = A2 @ (0.5 * dt * K1u) + B2
    k3, A3, B3 = deriv_batch(x + 0.5 * dt * k2, u, p, jacobian=True)
    K3x = A3 @ (eye + 0.5 * dt * K2x)
    K3u = A3 @ (0.5 * dt * K2u) + B3
    k4, A4, B4 = deriv_batch(x + dt * k3, u, p, jacobian=True)
    K4x = A4 @ (eye + dt * K3x)
    K4u = A4 @ (dt * K3u) + B4
    xn = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Ax = eye + dt / 6.0 * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    Bu = dt / 6.0 * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
    return xn, Ax, Bu


# ---------------------------------------------------------------------------
# Single-vehicle API


def _state_array(state) -> NDArray:
    if isinstance(state, VehicleState):
        return state.to_array()
    x = np.asarray(state, dtype=float)
    if x.shape != (12,):
        raise ValueError(f"state must have 12 components, got {x.shape}")
    return x


def dynamics_deriv(state, wrench: Wrench, params: VehicleParams) -> NDArray:
    """Continuous-time derivative of the 12-dim state under a body wrench."""
    x = _state_array(state)
    if abs(x[7]) >= PITCH_GUARD:
        raise SingularityError(f"pitch {x[7]:.6f} rad at Euler-rate singularity guard")
    phi, th, _ = x[EUL]
    w = x[RATES]
    R = rotation_zyx(x[EUL])
    inertia = np.asarray(params.inertia, dtype=float)
    g = np.array([0.0, 0.0, params.gravity])
    T = np.array([
        [1.0, np.sin(phi) * np.tan(th), np.cos(phi) * np.tan(th)],
        [0.0, np.cos(phi), -np.sin(phi)],
        [0.0, np.sin(phi) / np.cos(th), np.cos(phi) / np.cos(th)],
    ])
    out = np.empty(12)
    out[POS] = x[VEL]
    out[VEL] = g + R @ wrench.body_force / params.mass
    out[EUL] = T @ w
    out[RATES] = (wrench.body_torque - np.cross(w, inertia * w)) / inertia
    return out


def rk4_step(state, omega_sq, params: VehicleParams, dt: float) -> VehicleState:
    """Classical RK4 step with constant rotor speeds; Euler angles re-wrapped."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = _state_array(state)
    u = _as_omega_sq(omega_sq, params)
    try:
        xn = rk4_batch(x[None], u[None], ParamArrays.stack([params]), dt)[0]
    except SingularityError as exc:
        raise IntegrationError(str(exc)) from exc
    if not np.all(np.isfinite(xn)):
        raise IntegrationError("non-finite state after RK4 step")
    xn[EUL] = wrap_angle(xn[EUL])
    return VehicleState.from_array(xn)


def hover_input(params: VehicleParams) -> NDArray:
    return np.full(4, params.hover_omega_sq)
