"""Mesh-free Fokker-Planck solver built on a time-conditioned normalizing flow."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .flows import FlowEvalError, TemporalFlow, build_flow
from .metrics import EvalReport, evaluate_model, relative_kl, relative_l2
from .problems import PROBLEM_NAMES, Box, FokkerPlanckProblem, builtin
from .reference import AdiInstabilityError, GridSolution, adi_solve
from .residual import LossWeights, NonFiniteLossError, pde_loss, residual_values
from .training import (
    Adam,
    CountSchedule,
    TimeGridSpec,
    TrainConfig,
    TrainHooks,
    TrainResult,
    init_training_set,
    nonuniform_time_partition,
    resample_training_set,
    spatial_count_schedule,
    train_adaptive,
    uniform_time_partition,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdiInstabilityError",
    "Box",
    "ConfigError",
    "CountSchedule",
    "EvalReport",
    "ExperimentConfig",
    "FlowEvalError",
    "FokkerPlanckProblem",
    "GridSolution",
    "LossWeights",
    "NonFiniteLossError",
    "PROBLEM_NAMES",
    "TemporalFlow",
    "TimeGridSpec",
    "TrainConfig",
    "TrainHooks",
    "TrainResult",
    "adi_solve",
    "build_flow",
    "builtin",
    "evaluate_model",
    "init_training_set",
    "load_config",
    "nonuniform_time_partition",
    "parse_config",
    "pde_loss",
    "relative_kl",
    "relative_l2",
    "resample_training_set",
    "residual_values",
    "spatial_count_schedule",
    "train_adaptive",
    "uniform_time_partition",
]
