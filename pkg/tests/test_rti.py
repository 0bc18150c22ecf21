from __future__ import annotations

import numpy as np
import pytest
import sympy as sp

from formation_nmpc.config import NoiseConfig, ScenarioConfig
from formation_nmpc.dynamics import VehicleParams, VehicleState, hover_input, rot_z, wrap_angle
from formation_nmpc.ocp import ReferenceWindow, build_horizon_problem
from formation_nmpc.rti import (
    Budget,
    Trajectory,
    condense,
    initial_guess,
    kkt_tolerance,
    linearize,
    rti_control_step,
    shift_and_transform,
    sqp_step,
)
from formation_nmpc.scenario import sense

from _support import LinearToy, default_graph, random_point, random_problem

PARAMS = [VehicleParams()] * 3
EARTH = np.array([[0.0, 0.0, -2.0], [-1.0, -0.5, -2.5], [-1.0, 0.5, -2.5]])
QUIET = ScenarioConfig(noise=NoiseConfig().scaled(0.0))


def hover_problem(f1_error=(0.0, 0.0, 0.0), velocity_nan=False, horizon=15):
    """Noiseless problem for three level vehicles near the nominal formation."""
    graph = default_graph()
    pos = EARTH.copy()
    pos[1] += f1_error
    states = [VehicleState(position=p) for p in pos]
    fb = sense(states, QUIET, np.random.default_rng(0))
    if velocity_nan:
        fb.velocities_body[1, 0] = np.nan
    N = horizon
    refs = ReferenceWindow(np.tile(graph.desired, (N + 1, 1, 1)), np.tile(EARTH[0], (N + 1, 1)), np.zeros(N + 1))
    return build_horizon_problem(fb, refs, PARAMS, graph, horizon=N)


def toy(rng, n_x=3, n_u=2, horizon=6, **kw):
    A = np.eye(n_x) + 0.1 * rng.normal(size=(n_x, n_x))
    B = rng.normal(size=(n_x, n_u))
    return LinearToy(A, B, rng.normal(size=n_x), rng.uniform(0.5, 2.0, n_x), rng.uniform(0.1, 1.0, n_u),
                     horizon, x_ref=rng.normal(size=n_x), **kw)


def random_guess(rng, prob):
    return Trajectory(rng.normal(size=(prob.horizon + 1, prob.n_x)), rng.normal(size=(prob.horizon, prob.n_u)))


def sparse_model_objective(lin, dX, dU):
    N = lin.U.shape[0]
    r = lin.r + np.einsum("kri,ki->kr", lin.Jx, dX)
    r[:N] += np.einsum("kri,ki->kr", lin.Ju, dU)
    return 0.5 * float(np.sum(r**2))


def sparse_state_steps(lin, dU):
    N = lin.U.shape[0]
    dX = np.empty_like(lin.X)
    dX[0] = lin.init_gap
    for k in range(N):
        dX[k + 1] = lin.A[k] @ dX[k] + lin.B[k] @ dU[k] + lin.defects[k]
    return dX


def symbolic_kkt(prob: LinearToy, X: np.ndarray, U: np.ndarray) -> float:
    """KKT residual from a hand-built Lagrangian differentiated by sympy."""
    N, nx, nu = prob.horizon, prob.n_x, prob.n_u
    xs = sp.Matrix(N + 1, nx, lambda k, i: sp.Symbol(f"x{k}_{i}"))
    us = sp.Matrix(N, nu, lambda k, i: sp.Symbol(f"u{k}_{i}"))
    mus = sp.Matrix(N + 1, nx, lambda k, i: sp.Symbol(f"m{k}_{i}"))
    A, B = sp.Matrix(prob.Ad), sp.Matrix(prob.Bd)
    cost = sum(prob.wx[i] * (xs[k, i] - prob.x_ref[i]) ** 2 for k in range(N + 1) for i in range(nx)) / 2
    cost += sum(prob.wu[i] * us[k, i] ** 2 for k in range(N) for i in range(nu)) / 2
    cons = [xs.row(0).T - sp.Matrix(prob.x0)]
    cons += [xs.row(k + 1).T - A * xs.row(k).T - B * us.row(k).T for k in range(N)]
    lag = cost + sum((mus.row(k) * cons[k])[0] for k in range(N + 1))
    point = {xs[k, i]: X[k, i] for k in range(N + 1) for i in range(nx)}
    point.update({us[k, i]: U[k, i] for k in range(N) for i in range(nu)})
    eqs = [sp.diff(lag, x).subs(point) for x in xs]
    mu_sol = sp.solve(eqs, list(mus))
    grad_u = [float(sp.diff(lag, u).subs(point).subs(mu_sol)) for u in us]
    defects = [float(c.subs(point)) for block in cons for c in block]
    return max(max(abs(g) for g in grad_u), max(abs(d) for d in defects))


class TestCondensing:
    def test_single_stage_integrator(self):
        wx, wu = 3.0, 0.5
        prob = LinearToy([[1.0]], [[1.0]], [0.0], wx, wu, horizon=1)
        qp = condense(prob, linearize(prob, Trajectory(np.zeros((2, 1)), np.zeros((1, 1)))))
        assert qp.hessian[0, 0] == pytest.approx(wx + wu, rel=1e-14)
        assert qp.gradient[0] == 0.0
        assert qp.levenberg_shift == 0.0

    def test_zero_residual_gives_zero_gradient(self):
        rng = np.random.default_rng(1)
        prob = toy(rng)
        prob.x_ref = np.zeros(prob.n_x)
        prob.x0 = np.zeros(prob.n_x)
        qp = condense(prob, linearize(prob, initial_guess(prob)))
        np.testing.assert_array_equal(qp.gradient, 0.0)

    def test_matches_sparse_model(self):
        rng = np.random.default_rng(31)
        prob = random_problem(rng, horizon=15)
        X, U = random_point(rng, prob)
        lin = linearize(prob, Trajectory(X, U))
        qp = condense(prob, lin)
        scale = np.tile(prob.input_scale, prob.horizon)
        for _ in range(20):
            z = rng.normal(0.0, 1e-3, qp.n)
            dU = (z * scale).reshape(prob.horizon, prob.n_u)
            dX = sparse_state_steps(lin, dU)
            np.testing.assert_allclose((qp.state_map @ z + qp.state_offset).reshape(dX.shape), dX,
                                       rtol=1e-9, atol=1e-9 * np.max(np.abs(dX)))
            reference = sparse_model_objective(lin, dX, dU)
            condensed = qp.objective(z) - 0.5 * qp.levenberg_shift * float(z @ z)
            assert condensed == pytest.approx(reference, rel=1e-9)


class TestKkt:
    def test_linear_quadratic_one_step(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            prob = toy(rng)
            guess = random_guess(rng, prob)
            new, st = sqp_step(prob, guess)
            assert not st.used_fallback
            assert st.kkt_tolerance < 1e-10
            assert st.objective <= prob.reduced_cost(guess.U) + 1e-12
            assert kkt_tolerance(prob, new) < 1e-10

    def test_feasible_point_equals_reduced_gradient(self):
        rng = np.random.default_rng(3)
        prob = toy(rng)
        U = rng.normal(size=(prob.horizon, prob.n_u))
        point = Trajectory(prob.rollout(U), U)
        grad = np.empty(U.size)
        h = 1e-5
        for k in range(U.size):
            e = np.zeros(U.size)
            e[k] = h
            grad[k] = (prob.reduced_cost(U + e.reshape(U.shape)) - prob.reduced_cost(U - e.reshape(U.shape))) / (2 * h)
        assert kkt_tolerance(prob, point) == pytest.approx(np.max(np.abs(grad)), rel=1e-6)

    def test_matches_symbolic_lagrangian(self):
        rng = np.random.default_rng(4)
        prob = toy(rng, n_x=2, n_u=1, horizon=2)
        for _ in range(3):
            guess = random_guess(rng, prob)
            assert kkt_tolerance(prob, guess) == pytest.approx(symbolic_kkt(prob, guess.X, guess.U), rel=1e-9)

    def test_active_bound_absorbs_gradient(self):
        # Pulling hard against an upper bound: optimum sits on it with zero KKT.
        prob = LinearToy([[1.0]], [[1.0]], [0.0], 1.0, 1e-3, horizon=1, x_ref=[10.0],
                         lower=[-1.0], upper=[1.0])
        new, st = sqp_step(prob, Trajectory(np.zeros((2, 1)), np.zeros((1, 1))))
        assert new.U[0, 0] == 1.0
        assert st.kkt_tolerance == pytest.approx(0.0, abs=1e-12)


class TestShiftAndTransform:
    def test_zero_motion_is_pure_shift(self):
        rng = np.random.default_rng(5)
        X, U = rng.normal(size=(16, 36)), rng.normal(size=(15, 12))
        Xs, Us = shift_and_transform(X, U, [(np.zeros(3), 0.0)] * 3)
        np.testing.assert_array_equal(Xs[:-1], X[1:])
        np.testing.assert_array_equal(Xs[-1], X[-1])
        np.testing.assert_array_equal(Us[:-1], U[1:])
        np.testing.assert_array_equal(Us[-1], U[-1])

    def test_translation(self):
        X = np.zeros((3, 12))
        X[:, 0:3] = [[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.3, 0.0, 0.0]]
        Xs, _ = shift_and_transform(X, np.zeros((2, 4)), [(np.array([0.1, 0.0, 0.0]), 0.0)])
        np.testing.assert_allclose(Xs[:, 0], [0.1, 0.2, 0.2], atol=1e-15)
        np.testing.assert_array_equal(Xs[:, 1:3], 0.0)

    def test_rotated_frame_matches_earth_oracle(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(4, 12))
        frame_origin, frame_yaw = rng.normal(size=3), 0.7
        dp, dpsi = np.array([0.3, -0.2, 0.05]), np.deg2rad(5.0)
        Xs, _ = shift_and_transform(X, np.zeros((3, 4)), [(dp, dpsi)])
        new_origin = frame_origin + rot_z(frame_yaw) @ dp
        new_yaw = frame_yaw + dpsi
        for k_new, k_old in enumerate([1, 2, 3, 3]):
            earth_pos = rot_z(frame_yaw) @ X[k_old, 0:3] + frame_origin
            earth_vel = rot_z(frame_yaw) @ X[k_old, 3:6]
            np.testing.assert_allclose(rot_z(new_yaw) @ Xs[k_new, 0:3] + new_origin, earth_pos, atol=1e-12)
            np.testing.assert_allclose(rot_z(new_yaw) @ Xs[k_new, 3:6], earth_vel, atol=1e-12)
            assert wrap_angle(Xs[k_new, 8] + new_yaw - X[k_old, 8] - frame_yaw) == pytest.approx(0.0, abs=1e-12)
            np.testing.assert_array_equal(Xs[k_new, [6, 7, 9, 10, 11]], X[k_old, [6, 7, 9, 10, 11]])


class TestControlStep:
    def test_cold_start_reaches_initial_threshold(self):
        prob = hover_problem(f1_error=(0.3, -0.2, 0.1))
        _, _, st = rti_control_step(prob, initial_guess(prob), Budget(), is_first=True)
        assert not st.used_fallback
        assert st.kkt_tolerance <= 1e-3

    def test_kkt_monotone_from_cold(self):
        prob = hover_problem(f1_error=(0.2, 0.1, 0.0))
        guess = initial_guess(prob)
        history = [kkt_tolerance(prob, guess)]
        for _ in range(5):
            guess, st = sqp_step(prob, guess)
            assert not st.used_fallback
            history.append(st.kkt_tolerance)
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_converged_hover_single_step(self):
        prob = hover_problem()
        _, warm, _ = rti_control_step(prob, initial_guess(prob), Budget(), is_first=True)
        u0, _, st = rti_control_step(prob, warm, Budget())
        assert st.sqp_iterations == 1
        assert not st.used_fallback
        np.testing.assert_allclose(u0, np.tile(hover_input(PARAMS[0]), 3), rtol=1e-6)

    def test_deterministic(self):
        prob = hover_problem(f1_error=(0.3, 0.0, 0.0))
        runs = [rti_control_step(prob, initial_guess(prob), Budget(max_sqp_iters=3)) for _ in range(2)]
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        np.testing.assert_array_equal(runs[0][1].X, runs[1][1].X)
        assert runs[0][2].kkt_tolerance == runs[1][2].kkt_tolerance

    def test_test_mode_caps_iterations(self):
        prob = hover_problem(f1_error=(0.3, 0.2, 0.1))
        _, _, st = rti_control_step(prob, initial_guess(prob), Budget(running_kkt=1e-12, max_sqp_iters=2))
        assert st.sqp_iterations == 2

    def test_nan_feedback_falls_back(self):
        prob = hover_problem(velocity_nan=True)
        guess = initial_guess(prob, np.tile(hover_input(PARAMS[0]), 3))
        u0, _, st = rti_control_step(prob, guess, Budget())
        assert st.used_fallback
        np.testing.assert_array_equal(u0, guess.U[0])

    def test_infeasible_qp_applies_previous_input(self):
        prob = LinearToy([[1.0]], [[1.0]], [0.0], 1.0, 1.0, horizon=3, lower=[1.0], upper=[0.0])
        guess = Trajectory(np.zeros((4, 1)), np.full((3, 1), 0.5))
        u0, warm, st = rti_control_step(prob, guess, Budget())
        assert st.used_fallback
        assert u0[0] == 0.5
        assert warm.U.shape == guess.U.shape

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            Budget(sample_time=0.0)
