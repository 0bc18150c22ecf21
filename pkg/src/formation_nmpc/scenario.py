"""Closed-loop scenario: reference trajectory, sensing, plant and statistics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .config import ScenarioConfig
from .dynamics import (
    RPM_TO_RAD_S,
    DynamicsError,
    VehicleParams,
    VehicleState,
    rk4_step,
    rotation_zyx,
    rot_z,
    wrap_angle,
)
from .frames import AttitudePartial, measurement_from_geometry
from .ocp import Feedback, FormationGraph, ReferenceWindow, build_horizon_problem
from .rti import Budget, initial_guess, rti_control_step

log = logging.getLogger(__name__)

N_VEHICLES = 3
LEADER = 0
ERROR_PAIRS = {"err_f1_L": (0, 1), "err_f2_L": (0, 2), "err_f1_f2": (2, 1)}
DIVERGENCE_LIMIT = 1e4


class ScheduleError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    """Plant left the valid state region; ``log`` holds the steps up to the failure."""

    def __init__(self, message: str, log: RunLog | None = None):
        super().__init__(message)
        self.log = log


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryPoint:
    position: NDArray
    velocity: NDArray
    yaw: float


def _heading(psi: float) -> NDArray:
    return np.array([np.cos(psi), np.sin(psi), 0.0])


def _reference(t: float, config: ScenarioConfig) -> TrajectoryPoint:
    """Analytic leader reference; segments past the schedule end continue."""
    tr = config.trajectory
    sched = config.schedule()
    p = np.asarray(tr.start_position, dtype=float)
    psi = tr.start_yaw
    v = tr.linear_speed
    for name, t0, t1 in sched:
        last = name == sched[-1][0]
        tau = t - t0
        span = t1 - t0
        local = tau if (tau <= span or last) else span
        if name == "A":
            point = TrajectoryPoint(p, np.zeros(3), psi)
        elif name in ("B", "D"):
            point = TrajectoryPoint(p + v * local * _heading(psi), v * _heading(psi), psi)
        elif name == "C":
            rate = (np.pi / 2) / tr.turn_blend
            if local <= tr.turn_blend:
                ang = psi + rate * local
                pos = p + (v / rate) * np.array([np.sin(ang) - np.sin(psi), np.cos(psi) - np.cos(ang), 0.0])
                point = TrajectoryPoint(pos, v * _heading(ang), ang)
            else:
                ang = psi + np.pi / 2
                p_turn = p + (v / rate) * np.array([np.sin(ang) - np.sin(psi), np.cos(psi) - np.cos(ang), 0.0])
                rest = local - tr.turn_blend
                point = TrajectoryPoint(p_turn + v * rest * _heading(ang), v * _heading(ang), ang)
        else:  # E: helix climbing (NED -z) at constant tangential speed
            vh = np.sqrt(tr.spiral_speed**2 - tr.spiral_climb**2)
            rate = vh / tr.spiral_radius
            ang = psi + rate * local
            center = p + tr.spiral_radius * np.array([-np.sin(psi), np.cos(psi), 0.0])
            pos = center + tr.spiral_radius * np.array([np.sin(ang), -np.cos(ang), 0.0])
            pos[2] = p[2] - tr.spiral_climb * local
            vel = vh * _heading(ang)
            vel[2] = -tr.spiral_climb
            point = TrajectoryPoint(pos, vel, ang)
        if tau <= span or last:
            return TrajectoryPoint(point.position, point.velocity, float(wrap_angle(point.yaw)))
        p, psi = point.position, point.yaw
    raise ScheduleError(f"t={t} precedes the schedule")


def reference_at(t: float, config: ScenarioConfig) -> TrajectoryPoint:
    """Leader reference pose at time ``t`` within the configured schedule."""
    end = config.duration
    if not (0.0 <= t <= end + 1e-12) or not np.isfinite(t):
        raise ScheduleError(f"t={t} outside schedule [0, {end}]")
    return _reference(t, config)


def segment_at(t: float, config: ScenarioConfig) -> str:
    for name, t0, t1 in config.schedule():
        if t < t1 - 1e-12:
            return name
    return config.schedule()[-1][0]


def formation_graph(config: ScenarioConfig, t: float) -> FormationGraph:
    base = FormationGraph.bidirectional(config.formation.edges())
    sched = {name: t0 for name, t0, _ in config.schedule()}
    if "D" in sched and t >= sched["D"] - 1e-12:
        return base.with_desired(config.updated_formation.edges())
    return base


def reference_window(config: ScenarioConfig, t: float) -> ReferenceWindow:
    N, dt = config.horizon, config.dt
    times = t + dt * np.arange(N + 1)
    points = [_reference(tk, config) for tk in times]
    desired = np.stack([formation_graph(config, tk).desired for tk in times])
    return ReferenceWindow(
        desired=desired,
        leader_position=np.stack([p.position for p in points]),
        leader_yaw=np.array([p.yaw for p in points]),
    )


def perturb_model_params(
    true_params: VehicleParams,
    mass_std: float,
    inertia_std: float,
    rng: np.random.Generator,
) -> VehicleParams:
    """Prediction-model parameters with multiplicative Gaussian mass/inertia error."""
    if mass_std < 0 or inertia_std < 0:
        raise ValueError("uncertainty standard deviations must be nonnegative")
    mass_ratio = 1.0 + mass_std * rng.standard_normal()
    inertia_ratio = 1.0 + inertia_std * rng.standard_normal(3)
    mass = true_params.mass * max(mass_ratio, 1e-3)
    inertia = tuple(float(i) for i in np.asarray(true_params.inertia) * np.maximum(inertia_ratio, 1e-3))
    return VehicleParams(
        mass=mass, inertia=inertia, arm_length=true_params.arm_length,
        thrust_coeff=true_params.thrust_coeff, torque_coeff=true_params.torque_coeff,
        max_prop_speed=true_params.max_prop_speed, gravity=true_params.gravity,
    )


def initial_states(config: ScenarioConfig) -> list[VehicleState]:
    tr = config.trajectory
    p0 = np.asarray(tr.start_position, dtype=float)
    R = rot_z(tr.start_yaw)
    edges = config.formation.edges()
    states = [VehicleState(p0, euler=np.array([0.0, 0.0, tr.start_yaw]))]
    for k, target in enumerate((1, 2)):
        pos = p0 + R @ np.asarray(edges[(0, target)], dtype=float) + np.asarray(config.initial_offsets[k])
        states.append(VehicleState(pos, euler=np.array([0.0, 0.0, tr.start_yaw])))
    return states


def sense(states: list[VehicleState], config: ScenarioConfig, rng: np.random.Generator) -> Feedback:
    """Noisy onboard sensing plus the leader's absolute localization."""
    nz = config.noise
    euler_std = np.deg2rad(nz.imu_euler_deg)
    gyro_std = np.deg2rad(nz.gyro_deg_s)
    n = len(states)
    rotations = [rotation_zyx(s.euler) for s in states]
    velocities = np.empty((n, 3))
    rates = np.empty((n, 3))
    attitudes = []
    for v, s in enumerate(states):
        velocities[v] = rotations[v].T @ s.velocity + nz.optic_flow * rng.standard_normal(3)
        roll, pitch = s.euler[:2] + euler_std * rng.standard_normal(2)
        attitudes.append(AttitudePartial(float(roll), float(pitch)))
        rates[v] = s.body_rates + gyro_std * rng.standard_normal(3)
    measurements = {}
    for i in range(n):
        for j in range(n):
            if i != j:
                body = rotations[i].T @ (states[j].position - states[i].position)
                measurements[(i, j)] = measurement_from_geometry(body, nz.rel_loc, rng, i, j)
    leader_pos = states[LEADER].position + nz.abs_loc * rng.standard_normal(3)
    leader_yaw = float(wrap_angle(states[LEADER].yaw + nz.abs_yaw * rng.standard_normal()))
    return Feedback(velocities, attitudes, rates, measurements, leader_pos, leader_yaw)


def _columns(n: int) -> list[str]:
    cols = ["t"]
    for v in range(n):
        cols += [f"veh{v}_x", f"veh{v}_y", f"veh{v}_z", f"veh{v}_yaw"]
        cols += [f"veh{v}_rpm{k}" for k in range(1, 5)]
    cols += list(ERROR_PAIRS) + ["err_pos_L", "err_yaw_L", "objective", "kkt", "sqp_iters",
                                 "cpu_ms", "fallback", "fov_ok"]
    return cols


@dataclass
class RunLog:
    columns: list[str]
    data: NDArray                       # (steps, columns)
    states: NDArray                     # (steps, n, 12) true states at each sensing instant
    segments: list[str] = field(default_factory=list)
    seed: int = 0

    def column(self, name: str) -> NDArray:
        return self.data[:, self.columns.index(name)]

    def segment_mask(self, name: str) -> NDArray:
        return np.array([s == name for s in self.segments])

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, self.columns, self.data)


def write_csv(path: str | Path, columns: list[str], data: NDArray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in data:
            w.writerow([f"{v:.9g}" for v in row])


def formation_errors(states: list[VehicleState], graph_desired: dict[tuple[int, int], NDArray]) -> dict:
    """Ground-truth error norms in the observer's control frame."""
    out = {}
    for name, (obs, tgt) in ERROR_PAIRS.items():
        actual = rot_z(-states[obs].yaw) @ (states[tgt].position - states[obs].position)
        out[name] = float(np.linalg.norm(graph_desired[(obs, tgt)] - actual))
    return out


def simulate_run(config: ScenarioConfig, seed: int | None = None) -> RunLog:
    """One closed-loop run of the configured scenario."""
    seed = config.seed if seed is None else seed
    param_rng, sense_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    true_params = config.vehicle.params()
    model_params = [
        perturb_model_params(true_params, config.uncertainty.mass_std,
                             config.uncertainty.inertia_std, param_rng)
        for _ in range(N_VEHICLES)
    ]
    budget = Budget(sample_time=config.dt, initial_kkt=config.initial_kkt,
                    running_kkt=config.running_kkt, max_sqp_iters=config.test_mode)
    states = initial_states(config)
    cols = _columns(N_VEHICLES)
    n_steps = int(round(config.duration / config.dt))
    data = np.zeros((n_steps, len(cols)))
    true_log = np.zeros((n_steps, N_VEHICLES, 12))
    segments = []
    guess = None
    max_rpm = config.vehicle.max_rpm

    for step in range(n_steps):
        t = step * config.dt
        feedback = sense(states, config, sense_rng)
        graph = formation_graph(config, t)
        problem = build_horizon_problem(
            feedback, reference_window(config, t), model_params, graph,
            config.weights, config.horizon, config.dt,
        )
        if guess is None or not config.warm_start:
            guess = initial_guess(problem)
        u0, warm, status = rti_control_step(problem, guess, budget, is_first=(step == 0))
        # A fallback without a finite KKT means the guess itself could not be
        # linearized; shifting it would fail again, so reseed from hover.
        guess = None if (status.used_fallback and not np.isfinite(status.kkt_tolerance)) else warm

        rpm = np.sqrt(np.maximum(u0, 0.0)) / RPM_TO_RAD_S
        rpm = np.clip(rpm, 0.0, max_rpm).reshape(N_VEHICLES, 4)
        omega_sq = (rpm * RPM_TO_RAD_S) ** 2

        ref = _reference(t, config)
        desired = dict(zip(graph.pairs, graph.desired))
        errs = formation_errors(states, desired)
        fov_ok = all(feedback.measurements[(f, LEADER)].in_fov for f in range(1, N_VEHICLES))
        row = [t]
        for v, s in enumerate(states):
            row += [*s.position, s.yaw, *rpm[v]]
        row += [errs[k] for k in ERROR_PAIRS]
        row += [
            float(np.linalg.norm(ref.position - states[LEADER].position)),
            abs(float(wrap_angle(ref.yaw - states[LEADER].yaw))),
            status.objective, status.kkt_tolerance, status.sqp_iterations,
            1e3 * status.cpu_time, float(status.used_fallback), float(fov_ok),
        ]
        data[step] = row
        true_log[step] = [s.to_array() for s in states]
        segments.append(segment_at(t, config))

        try:
            states = [rk4_step(s, omega_sq[v], true_params, config.dt) for v, s in enumerate(states)]
            worst = max(float(np.max(np.abs(s.to_array()))) for s in states)
            if worst > DIVERGENCE_LIMIT:
                raise DynamicsError(f"state norm {worst:.3g} exceeds {DIVERGENCE_LIMIT:g}")
        except DynamicsError as exc:
            partial = RunLog(cols, data[:step + 1], true_log[:step + 1], segments, seed)
            raise SimulationDiverged(f"plant diverged at t={t:.2f}s: {exc}", partial) from exc
    return RunLog(cols, data, true_log, segments, seed)


@dataclass
class Aggregate:
    columns: list[str]
    mean: NDArray
    std: NDArray
    summaries: dict[str, dict[str, float]]

    def to_csv(self, path: str | Path) -> None:
        cols = ["t"] + [f"{c}_{stat}" for c in self.columns[1:] for stat in ("mean", "std")]
        body = np.empty((self.mean.shape[0], len(cols)))
        body[:, 0] = self.mean[:, 0]
        body[:, 1::2] = self.mean[:, 1:]
        body[:, 2::2] = self.std[:, 1:]
        write_csv(path, cols, body)


SUMMARY_METRICS = list(ERROR_PAIRS) + ["err_pos_L", "err_yaw_L", "objective", "kkt", "cpu_ms",
                                       "sqp_iters", "fallback"]


def steady_state_mask(log: RunLog, segment: str, fraction: float = 0.5) -> NDArray:
    """Last ``fraction`` of the steps of ``segment``."""
    idx = np.flatnonzero(log.segment_mask(segment))
    mask = np.zeros(len(log.segments), dtype=bool)
    if idx.size:
        mask[idx[int(np.floor(idx.size * (1.0 - fraction))):]] = True
    return mask


def aggregate_runs(logs: list[RunLog]) -> Aggregate:
    """Per-step mean and sample standard deviation over runs, plus segment summaries."""
    if not logs:
        raise AggregationError("need at least one run log")
    shape = logs[0].data.shape
    if any(lg.data.shape != shape or lg.columns != logs[0].columns for lg in logs):
        raise AggregationError("run logs differ in length or columns")
    stack = np.stack([lg.data for lg in logs])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0, ddof=1) if len(logs) > 1 else np.zeros(shape)
    summaries = {}
    for seg in dict.fromkeys(logs[0].segments):
        mask = steady_state_mask(logs[0], seg)
        summaries[seg] = {
            m: float(np.mean(stack[:, mask, logs[0].columns.index(m)]))
            for m in SUMMARY_METRICS
        }
    return Aggregate(list(logs[0].columns), mean, std, summaries)


def segment_mean(log: RunLog, column: str, segment: str) -> float:
    """Mean of ``column`` over every logged step of ``segment`` (nan if none)."""
    mask = log.segment_mask(segment)
    return float(np.mean(log.column(column)[mask])) if mask.any() else float("nan")


@dataclass
class AblationRecord:
    seed: int
    warm: float
    cold: float
    warm_diverged: bool = False
    cold_diverged: bool = False

    @property
    def warm_better(self) -> bool:
        return bool(self.warm < self.cold) or (self.cold_diverged and not self.warm_diverged)


def _run_tolerant(config: ScenarioConfig, seed: int) -> tuple[RunLog, bool]:
    try:
        return simulate_run(config, seed), False
    except SimulationDiverged as exc:
        log.warning("seed %d: %s", seed, exc)
        return exc.log, True


def run_ablation(config: ScenarioConfig, seeds, segment: str = "C",
                 metric: str = "objective") -> list[AblationRecord]:
    """Paired warm-start on/off runs; mean ``metric`` over ``segment`` per seed.

    A diverged arm reports the mean over the steps it logged in the segment,
    which is nan when it never got there.
    """
    if segment not in [name for name, _, _ in config.schedule()]:
        raise ScheduleError(f"segment {segment} is not part of the simulated schedule")
    out = []
    for seed in seeds:
        warm_log, warm_div = _run_tolerant(config.replace(warm_start=True), seed)
        cold_log, cold_div = _run_tolerant(config.replace(warm_start=False), seed)
        out.append(AblationRecord(int(seed), segment_mean(warm_log, metric, segment),
                                  segment_mean(cold_log, metric, segment), warm_div, cold_div))
    return out
