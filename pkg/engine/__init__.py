"""
Linear-quadratic fine-tuning engine.

Linearizes a small pre-trained network around its weights, solves or trains
the resulting quadratic problem, and computes exact leave-one-out influence
on it.
"""

from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    GuardError,
    LqfError,
    NumericError,
    SingularSystemError,
    StorageError,
    exit_code_for,
)
from .network import NetworkSpec, ParamVector, TangentModel, build_mlp_spec, init_params
from .quadratic import LinearizedProblem, assemble, closed_form
from .kfac import KfacState
from .trainer import OptimizerConfig, Trajectory
from .data import LabeledDataset

__all__ = [
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "GuardError",
    "KfacState",
    "LabeledDataset",
    "LinearizedProblem",
    "LqfError",
    "NetworkSpec",
    "NumericError",
    "OptimizerConfig",
    "ParamVector",
    "SingularSystemError",
    "StorageError",
    "TangentModel",
    "Trajectory",
    "assemble",
    "build_mlp_spec",
    "closed_form",
    "exit_code_for",
    "init_params",
]
