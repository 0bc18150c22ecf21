"""Leader-follower NMPC formation control of quadrotors from relative sensing."""

from .dynamics import VehicleParams, VehicleState, Wrench, mixer, inverse_mixer, dynamics_deriv, rk4_step
from .frames import (
    AttitudePartial,
    FramePose,
    RelativeMeasurement,
    displacement_from_measurement,
    leader_global_states,
    measurement_from_geometry,
    relative_displacement_control_frame,
    relative_yaw_estimate,
)
from .ocp import FormationGraph, HorizonProblem, Weights, build_horizon_problem, stage_residuals
from .rti import Budget, SolverStatus, Trajectory, rti_control_step, sqp_step, kkt_tolerance
from .config import ScenarioConfig, load_config
from .scenario import aggregate_runs, reference_at, simulate_run

__version__ = "0.1.0"
