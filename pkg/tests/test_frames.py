from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from formation_nmpc.dynamics import VehicleState, rot_z, rotation_zyx, wrap_angle
from formation_nmpc.frames import (
    AttitudePartial,
    DegenerateGeometryError,
    FramePose,
    RelativeMeasurement,
    displacement_from_measurement,
    leader_global_states,
    measurement_from_geometry,
    relative_displacement_control_frame,
    relative_yaw_estimate,
)

DEG = np.pi / 180


def mutual_measurements(pos1, euler1, pos2, euler2):
    """Noiseless readings each vehicle takes of the other, from earth-frame geometry."""
    d = np.asarray(pos2, dtype=float) - pos1
    m12 = measurement_from_geometry(rotation_zyx(euler1).T @ d, 0.0)
    m21 = measurement_from_geometry(rotation_zyx(euler2).T @ -d, 0.0)
    return m12, m21, AttitudePartial(*euler1[:2]), AttitudePartial(*euler2[:2])


def random_yaw_case(rng):
    e1 = np.array([*rng.uniform(-20, 20, 2) * DEG, rng.uniform(-np.pi, np.pi)])
    e2 = np.array([*rng.uniform(-20, 20, 2) * DEG, rng.uniform(-np.pi, np.pi)])
    p1 = rng.normal(0.0, 2.0, 3)
    offset = rng.normal(0.0, 1.5, 3)
    offset[:2] += np.sign(offset[:2]) * 0.3  # keep clear of vertical alignment
    return p1, e1, p1 + offset, e2


def yaw_estimator_worst_error(n: int = 1000, seed: int = 2024) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        p1, e1, p2, e2 = random_yaw_case(rng)
        est = relative_yaw_estimate(*mutual_measurements(p1, e1, p2, e2))
        worst = max(worst, abs(float(wrap_angle(est - (e1[2] - e2[2])))))
    return worst


class TestMeasurementGeometry:
    @pytest.mark.parametrize("meas, expected", [
        ((1.0, 0.0, 0.0), (1.0, 0.0, 0.0)),
        ((2.0, np.pi / 2, 0.0), (0.0, 2.0, 0.0)),
        ((1.0, np.pi / 4, np.pi / 4), (0.5, 0.5, 0.70711)),
    ])
    def test_displacement_examples(self, meas, expected):
        out = displacement_from_measurement(RelativeMeasurement(*meas))
        np.testing.assert_allclose(out, expected, atol=5e-6)

    def test_axis_measurement(self):
        m = measurement_from_geometry([1.0, 0.0, 0.0], 0.0)
        assert (m.range, m.azimuth, m.elevation) == (1.0, 0.0, 0.0)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            v = rng.normal(0.0, 3.0, 3)
            worst = max(worst, np.max(np.abs(displacement_from_measurement(measurement_from_geometry(v, 0.0)) - v)))
        assert worst < 1e-12

    def test_noise_statistics(self):
        rng = np.random.default_rng(99)
        truth = np.array([-1.0, 0.5, -0.5])
        errs = np.array([displacement_from_measurement(measurement_from_geometry(truth, 0.025, rng)) - truth
                         for _ in range(100_000)])
        np.testing.assert_allclose(errs.std(axis=0, ddof=1), 0.025, rtol=0.05)

    def test_zero_displacement_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            measurement_from_geometry(np.zeros(3), 0.0)

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            measurement_from_geometry([1.0, 0.0, 0.0], 0.1)

    def test_invalid_measurement(self):
        with pytest.raises(ValueError):
            RelativeMeasurement(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            RelativeMeasurement(1.0, 0.0, 1.6)

    def test_field_of_view(self):
        assert RelativeMeasurement(1.0, 59 * DEG, 44 * DEG).in_fov
        assert not RelativeMeasurement(1.0, 61 * DEG, 0.0).in_fov
        assert not RelativeMeasurement(1.0, 0.0, -46 * DEG).in_fov

    @settings(max_examples=100)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
    def test_roundtrip_property(self, v):
        back = displacement_from_measurement(measurement_from_geometry(v, 0.0))
        np.testing.assert_allclose(back, v, atol=1e-12 * max(1.0, np.linalg.norm(v)))


class TestRelativeYaw:
    def test_level_equal_yaw(self):
        m12 = RelativeMeasurement(1.0, 0.3, 0.1)
        x21 = -displacement_from_measurement(m12)
        m21 = measurement_from_geometry(x21, 0.0)
        level = AttitudePartial(0.0, 0.0)
        assert relative_yaw_estimate(m12, m21, level, level) == pytest.approx(0.0, abs=1e-12)

    def test_level_example(self):
        e1 = np.array([0.0, 0.0, 30 * DEG])
        e2 = np.array([0.0, 0.0, 10 * DEG])
        est = relative_yaw_estimate(*mutual_measurements(np.zeros(3), e1, [2.0, 1.0, 0.5], e2))
        assert est == pytest.approx(20 * DEG, abs=1e-9)

    def test_random_tilted_configurations(self):
        assert yaw_estimator_worst_error() <= 1e-9

    def test_antisymmetry_residual(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            p1, e1, p2, e2 = random_yaw_case(rng)
            m12, m21, a1, a2 = mutual_measurements(p1, e1, p2, e2)
            est = relative_yaw_estimate(m12, m21, a1, a2)
            b = a1.tilt() @ displacement_from_measurement(m12)
            a = a2.tilt() @ displacement_from_measurement(m21)
            resid = rot_z(est) @ b + a
            assert np.hypot(resid[0], resid[1]) < 1e-9

    def test_vertical_alignment_is_degenerate(self):
        m12 = measurement_from_geometry([0.0, 0.0, 1.0], 0.0)
        m21 = measurement_from_geometry([0.0, 0.0, -1.0], 0.0)
        level = AttitudePartial(0.0, 0.0)
        with pytest.raises(DegenerateGeometryError):
            relative_yaw_estimate(m12, m21, level, level)


class TestFrameChain:
    def test_identity_chain(self):
        out = relative_displacement_control_frame(VehicleState(), VehicleState(), [1.0, 0.0, 0.0], 0.0)
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-15)

    def test_observer_yawed(self):
        yawed = VehicleState(euler=np.array([0.0, 0.0, np.pi / 2]))
        out = relative_displacement_control_frame(yawed, VehicleState(), [1.0, 0.0, 0.0], 0.0)
        np.testing.assert_allclose(out, [0.0, -1.0, 0.0], atol=1e-15)

    def test_target_frame_rotated(self):
        target = VehicleState(position=np.array([0.0, 1.0, 0.0]))
        out = relative_displacement_control_frame(VehicleState(), target, np.zeros(3), np.pi / 2)
        np.testing.assert_allclose(out, [-1.0, 0.0, 0.0], atol=1e-15)

    def test_matches_global_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            frame_i = FramePose(rng.normal(0, 3, 3), rng.uniform(-np.pi, np.pi))
            frame_j = FramePose(rng.normal(0, 3, 3), rng.uniform(-np.pi, np.pi))
            si = VehicleState(rng.normal(0, 1, 3), euler=np.array([0.1, -0.2, rng.uniform(-np.pi, np.pi)]))
            sj = VehicleState(rng.normal(0, 1, 3), euler=np.array([0.0, 0.3, rng.uniform(-np.pi, np.pi)]))
            earth_i = rot_z(frame_i.yaw_offset) @ si.position + frame_i.origin_offset
            earth_j = rot_z(frame_j.yaw_offset) @ sj.position + frame_j.origin_offset
            truth = rot_z(-(frame_i.yaw_offset + si.yaw)) @ (earth_j - earth_i)
            offset = rot_z(-frame_i.yaw_offset) @ (frame_j.origin_offset - frame_i.origin_offset)
            rel_yaw = frame_j.yaw_offset - frame_i.yaw_offset
            out = relative_displacement_control_frame(si, sj, offset, rel_yaw)
            np.testing.assert_allclose(out, truth, atol=1e-9)


class TestLeaderGlobal:
    def test_identity(self):
        s = VehicleState(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.3]), np.array([0.0, 0.0, 0.4]))
        pos, vel, yaw = leader_global_states(s, FramePose(np.zeros(3), 0.0))
        np.testing.assert_array_equal(pos, s.position)
        np.testing.assert_array_equal(vel, s.velocity)
        assert yaw == pytest.approx(0.4)

    def test_translation(self):
        s = VehicleState(np.array([1.0, 0.0, 0.0]), np.array([0.5, 0.0, 0.0]))
        pos, vel, _ = leader_global_states(s, FramePose([5.0, 5.0, -2.0], 0.0))
        np.testing.assert_allclose(pos, [6.0, 5.0, -2.0])
        np.testing.assert_allclose(vel, [0.5, 0.0, 0.0])

    def test_rotation(self):
        s = VehicleState(np.array([1.0, 0.0, 0.0]), euler=np.array([0.0, 0.0, 3.0]))
        pos, _, yaw = leader_global_states(s, FramePose([1.0, 2.0, 3.0], np.pi / 2))
        np.testing.assert_allclose(pos, [1.0, 3.0, 3.0], atol=1e-15)
        assert yaw == pytest.approx(wrap_angle(3.0 + np.pi / 2))
