"""Combining zero-inflated insurance claim-cost predictions.

Modules: ``metrics`` (accuracy measures and tests), ``data`` (I/O, splits,
simulator, synthetic forecasters), ``solvers`` (numeric engines),
``combiners`` (the ten combining methods) and ``cli``.
"""
from ._backend import backend_name
from .combiners import METHODS, CombinerModel, fit, predict
from .data import (
    ForecasterSpec,
    Policies,
    SimConfig,
    SplitSpec,
    load_policies,
    simulate_claims,
    split,
    synthesize_forecasters,
)
from .exceptions import (
    ClaimCombError,
    ConvergenceError,
    InfeasibleConfigError,
    InvalidInputError,
    RankDeficientError,
    SchemaError,
    SolverError,
    UndefinedMetricError,
)
from .metrics import MetricReport, evaluate, gini, lorenz_points, paired_loss_test

__version__ = "0.1.0"

__all__ = [
    "METHODS", "CombinerModel", "fit", "predict", "ForecasterSpec", "Policies", "SimConfig",
    "SplitSpec", "load_policies", "simulate_claims", "split", "synthesize_forecasters",
    "ClaimCombError", "ConvergenceError", "InfeasibleConfigError", "InvalidInputError",
    "RankDeficientError", "SchemaError", "SolverError", "UndefinedMetricError",
    "MetricReport", "evaluate", "gini", "lorenz_points", "paired_loss_test", "backend_name",
]
