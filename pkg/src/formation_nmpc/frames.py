"""Local MPC frames, range/bearing sensing and relative-yaw estimation.

Per horizon each vehicle owns three frames: an inertial MPC frame {mi} fixed at
its pose at horizon start (roll/pitch of the earth frame, yaw of the body), the
body frame {mb}, and a control frame {mc} riding with the body but sharing
roll/pitch with the earth frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .dynamics import VehicleState, rot_x, rot_y, rot_z, wrap_angle

FOV_AZIMUTH = np.deg2rad(60.0)
FOV_ELEVATION = np.deg2rad(45.0)


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FramePose:
    """Pose of an inertial MPC frame in the earth frame (translation + yaw)."""

    origin_offset: NDArray
    yaw_offset: float

    def __post_init__(self):
        object.__setattr__(self, "origin_offset", np.asarray(self.origin_offset, dtype=float))
        object.__setattr__(self, "yaw_offset", float(wrap_angle(self.yaw_offset)))


@dataclass(frozen=True)
class RelativeMeasurement:
    range: float
    azimuth: float
    elevation: float
    observer_id: int = 0
    target_id: int = 1

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError(f"range must be positive, got {self.range}")
        if not -np.pi / 2 <= self.elevation <= np.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")

    @property
    def in_fov(self) -> bool:
        return abs(self.azimuth) <= FOV_AZIMUTH and abs(self.elevation) <= FOV_ELEVATION


@dataclass(frozen=True)
class AttitudePartial:
    """Absolute roll and pitch (IMU); yaw is unobservable for followers."""

    roll: float
    pitch: float

    def tilt(self) -> NDArray:
        """Rotation from the body frame to its yaw-aligned level frame."""
        return rot_y(self.pitch) @ rot_x(self.roll)


def displacement_from_measurement(meas: RelativeMeasurement) -> NDArray:
    r, a, b = meas.range, meas.azimuth, meas.elevation
    return r * np.array([np.cos(b) * np.cos(a), np.cos(b) * np.sin(a), np.sin(b)])


def measurement_from_geometry(
    true_displacement_body,
    noise_std: float,
    rng: np.random.Generator | None = None,
    observer_id: int = 0,
    target_id: int = 1,
) -> RelativeMeasurement:
    """Simulated range/bearing reading of a neighbor at ``true_displacement_body``.

    Noise is added per Cartesian axis (meters) before extracting range and
    bearing, so ``noise_std`` is directly a localization error.
    """
    v = np.asarray(true_displacement_body, dtype=float)
    if np.linalg.norm(v) == 0.0:
        raise DegenerateGeometryError("zero relative displacement has no bearing")
    if noise_std > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_std > 0")
        v = v + rng.normal(0.0, noise_std, size=3)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise DegenerateGeometryError("noisy displacement collapsed to zero")
    azimuth = float(np.arctan2(v[1], v[0]))
    elevation = float(np.arctan2(v[2], np.hypot(v[0], v[1])))
    return RelativeMeasurement(r, float(wrap_angle(azimuth)), elevation, observer_id, target_id)


def relative_yaw_estimate(
    meas_12: RelativeMeasurement,
    meas_21: RelativeMeasurement,
    att_1: AttitudePartial,
    att_2: AttitudePartial,
) -> float:
    """Estimate yaw_1 - yaw_2 from the two mutual range/bearing readings.

    Leveling both readings with the known roll/pitch leaves two horizontal
    vectors related by a pure yaw rotation; the least-squares angle between
    them is a single atan2.
    """
    b = att_1.tilt() @ displacement_from_measurement(meas_12)
    a = -(att_2.tilt() @ displacement_from_measurement(meas_21))
    scale = max(meas_12.range, meas_21.range)
    if np.hypot(a[0], a[1]) < 1e-9 * scale or np.hypot(b[0], b[1]) < 1e-9 * scale:
        raise DegenerateGeometryError("vehicles are vertically aligned; relative yaw unobservable")
    return float(wrap_angle(np.arctan2(a[1] * b[0] - a[0] * b[1], a[0] * b[0] + a[1] * b[1])))


def relative_displacement_control_frame(
    state_i: VehicleState,
    state_j: VehicleState,
    offset_ij,
    rel_yaw_ij: float,
) -> NDArray:
    """Position of vehicle j relative to vehicle i, expressed in i's control frame.

    ``offset_ij`` is the origin of {mi_j} seen from {mi_i} and ``rel_yaw_ij`` is
    the yaw of {mi_j} relative to {mi_i}; both states are in their own {mi}.
    """
    p_j_in_i = rot_z(rel_yaw_ij) @ state_j.position + np.asarray(offset_ij, dtype=float)
    return rot_z(-state_i.yaw) @ (p_j_in_i - state_i.position)


def leader_global_states(state_leader: VehicleState, frame_leader: FramePose):
    """Leader position, velocity and yaw in the earth frame from its {mi} state."""
    R = rot_z(frame_leader.yaw_offset)
    position = R @ state_leader.position + frame_leader.origin_offset
    velocity = R @ state_leader.velocity
    yaw = float(wrap_angle(state_leader.yaw + frame_leader.yaw_offset))
    return position, velocity, yaw
