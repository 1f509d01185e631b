"""Parking-lot motion predictor trained on time-reversed noise trajectories, and an
expected-free-energy planner that uses it for control."""

from .dynamics import ActionCommand, DynamicsParams, NoiseCovariance, VehicleState
from .forward import NoiseSchedule, TrajectoryDataset, collect, reverse_dataset
from .planner import PlannerConfig, PreferenceWeights, run_episode, select_action
from .predictor import PredictorParams, TrainConfig, evaluate, train
from .world import LotConfig, ParkTolerance, build_world, scenario_1, scenario_2

__all__ = [
    "ActionCommand",
    "DynamicsParams",
    "LotConfig",
    "NoiseCovariance",
    "NoiseSchedule",
    "ParkTolerance",
    "PlannerConfig",
    "PredictorParams",
    "PreferenceWeights",
    "TrainConfig",
    "TrajectoryDataset",
    "VehicleState",
    "build_world",
    "collect",
    "evaluate",
    "reverse_dataset",
    "run_episode",
    "scenario_1",
    "scenario_2",
    "select_action",
    "train",
]
