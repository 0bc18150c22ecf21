"""Scenario configuration with the nominal five-segment defaults baked in.

An empty YAML file (or no file) reproduces the nominal five-segment run.
Keys mirror the dataclass fields; nested sections are mappings.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import GRAVITY, RPM_TO_RAD_S, VehicleParams
from .ocp import Weights

SEGMENTS = ("A", "B", "C", "D", "E")


class ConfigError(ValueError):
    pass


@dataclass
class VehicleConfig:
    mass: float = 0.5
    inertia: tuple[float, float, float] = (2.5e-3, 2.5e-3, 5.0e-3)
    arm_length: float = 0.18
    max_rpm: float = 6000.0
    hover_rpm: float = 3000.0
    torque_to_thrust: float = 0.016

    def params(self) -> VehicleParams:
        c_t = self.mass * GRAVITY / (4.0 * (self.hover_rpm * RPM_TO_RAD_S) ** 2)
        return VehicleParams(
            mass=self.mass, inertia=tuple(self.inertia), arm_length=self.arm_length,
            thrust_coeff=c_t, torque_coeff=self.torque_to_thrust * c_t,
            max_prop_speed=self.max_rpm * RPM_TO_RAD_S,
        )


@dataclass
class NoiseConfig:
    optic_flow: float = 0.25        # m/s
    imu_euler_deg: float = 0.005    # deg, roll/pitch only
    gyro_deg_s: float = 3.0         # deg/s
    rel_loc: float = 0.025          # m per axis
    abs_loc: float = 0.02           # m, leader only
    abs_yaw: float = 0.02           # rad, leader only

    def scaled(self, factor: float) -> NoiseConfig:
        return NoiseConfig(**{k: v * factor for k, v in dataclasses.asdict(self).items()})


@dataclass
class UncertaintyConfig:
    mass_std: float = 0.01
    inertia_std: float = 0.05


@dataclass
class TrajectoryConfig:
    static: float = 1.0       # A
    linear: float = 4.0       # B
    turn: float = 2.5         # C
    regen: float = 3.0        # D
    spiral: float = 6.0       # E
    turn_blend: float = 1.5
    linear_speed: float = 2.0
    spiral_speed: float = 1.9
    spiral_radius: float = 2.0
    spiral_climb: float = 0.25
    start_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_yaw: float = 0.0

    def durations(self) -> dict[str, float]:
        return dict(zip(SEGMENTS, (self.static, self.linear, self.turn, self.regen, self.spiral)))


@dataclass
class FormationConfig:
    """Desired displacement of the first vehicle w.r.t. the second, in the
    second's control frame. Vehicle 0 is the leader L, 1 is F1, 2 is F2."""

    f1_wrt_l: tuple[float, float, float] = (-1.0, -0.5, -0.5)
    f1_wrt_f2: tuple[float, float, float] = (0.0, -1.0, 0.0)
    f2_wrt_l: tuple[float, float, float] = (-1.0, 0.5, -0.5)

    def edges(self) -> dict[tuple[int, int], tuple[float, float, float]]:
        return {(0, 1): self.f1_wrt_l, (0, 2): self.f2_wrt_l, (2, 1): self.f1_wrt_f2}


def _updated_formation() -> FormationConfig:
    return FormationConfig((-1.0, -0.75, -0.5), (0.0, -1.5, 0.0), (-1.0, 0.75, -0.5))


@dataclass
class ScenarioConfig:
    dt: float = 0.05
    horizon: int = 15
    weights: Weights = field(default_factory=Weights)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    formation: FormationConfig = field(default_factory=FormationConfig)
    updated_formation: FormationConfig = field(default_factory=_updated_formation)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    initial_kkt: float = 1e-3
    running_kkt: float = 10.0
    stop_after: str = "E"
    # Initial follower position errors (F1, F2) in the earth frame, meters.
    initial_offsets: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    runs: int = 10
    seed: int = 0
    out_dir: str = "out"
    warm_start: bool = True
    test_mode: int | None = None

    def __post_init__(self):
        if self.stop_after not in SEGMENTS:
            raise ConfigError(f"stop_after must be one of {SEGMENTS}, got {self.stop_after!r}")
        if self.runs < 1:
            raise ConfigError("run count must be at least 1")
        if any(d <= 0 for d in self.trajectory.durations().values()):
            raise ConfigError("segment durations must be positive")
        if not 0 < self.trajectory.turn_blend <= self.trajectory.turn:
            raise ConfigError("turn blend must fit inside segment C")
        if self.dt <= 0 or self.horizon < 1:
            raise ConfigError("dt and horizon must be positive")

    def schedule(self) -> list[tuple[str, float, float]]:
        """(segment, start, end) for the segments that are simulated."""
        out, t = [], 0.0
        for name, dur in self.trajectory.durations().items():
            out.append((name, t, t + dur))
            t += dur
            if name == self.stop_after:
                break
        return out

    @property
    def duration(self) -> float:
        return self.schedule()[-1][2]

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)


def _build(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    nested = {"weights": Weights, "vehicle": VehicleConfig, "formation": FormationConfig,
              "updated_formation": FormationConfig, "noise": NoiseConfig,
              "uncertainty": UncertaintyConfig, "trajectory": TrajectoryConfig}
    for key, value in data.items():
        if cls is ScenarioConfig and key in nested:
            kwargs[key] = _build(nested[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> ScenarioConfig:
    return _build(ScenarioConfig, data or {})


def load_config(path: str | Path | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def config_to_dict(config: ScenarioConfig) -> dict:
    def plain(v):
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    return {k: ({kk: plain(vv) for kk, vv in v.items()} if isinstance(v, dict) else plain(v))
            for k, v in dataclasses.asdict(config).items()}
