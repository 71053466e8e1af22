"""Residual weighted learning of individualized combination treatment rules.

Decision functions ``f_1..f_K`` (linear or kernel) are fitted by minimizing a
residual-weighted, truncated multi-label hinge loss with a
difference-of-convex algorithm; each inner step is a quadratic program.
"""
from .core import (
    DecisionFunctionParams,
    FitConfig,
    FitError,
    InvalidInputError,
    MlrwlError,
    ResidualWeights,
    TrialDataset,
    enumerate_combinations,
    sign_decision,
)
from .dc_engine import FitDiagnostics, dc_fit
from .evaluation import MethodConfig, accuracy, empirical_value, fit_rule, grid_tune, replicate_experiment
from .kernels import KernelSpec, median_bandwidth
from .loss import empirical_objective, psi_loss
from .qpsolve import QuadraticProgram, solve_qp
from .simgen import simulate
from .working_models import fit_propensity, plugin_weights

__version__ = "0.1.0"

__all__ = [
    "DecisionFunctionParams",
    "FitConfig",
    "FitError",
    "InvalidInputError",
    "MlrwlError",
    "ResidualWeights",
    "TrialDataset",
    "enumerate_combinations",
    "sign_decision",
    "FitDiagnostics",
    "dc_fit",
    "MethodConfig",
    "accuracy",
    "empirical_value",
    "fit_rule",
    "grid_tune",
    "replicate_experiment",
    "KernelSpec",
    "median_bandwidth",
    "empirical_objective",
    "psi_loss",
    "QuadraticProgram",
    "solve_qp",
    "simulate",
    "fit_propensity",
    "plugin_weights",
]
