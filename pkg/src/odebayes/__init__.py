"""Bayesian inference for ODE models: solver, target density, MCMC, diagnostics and PSIS-LOO."""

__version__ = "0.1.0"

from .diagnostics import ess, rhat, summarize
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateChainError,
    DimensionMismatch,
    InitFailure,
    LabelMismatch,
    MaxStepsExceeded,
    NonFiniteState,
    OdeBayesError,
    OutOfBounds,
    SolverError,
    UnknownOverride,
)
from .evaluation import LogLikMatrix, LooResult, loo_compare, lpd, posterior_predictive, psis_loo
from .model import Dataset, Group, Model, simulate_data
from .models import make_model
from .ode import ForcingSchedule, OdeSystem, SolverConfig, solve, solve_with_sensitivities
from .samplers import SamplerConfig, run_chain, run_chains
from .target import PoolingStructure, build_target

__all__ = [
    "__version__",
    "ConfigError", "DataFormatError", "DegenerateChainError", "DimensionMismatch", "InitFailure",
    "LabelMismatch", "MaxStepsExceeded", "NonFiniteState", "OdeBayesError", "OutOfBounds",
    "SolverError", "UnknownOverride",
    "Dataset", "ForcingSchedule", "Group", "LogLikMatrix", "LooResult", "Model", "OdeSystem",
    "PoolingStructure", "SamplerConfig", "SolverConfig",
    "build_target", "ess", "loo_compare", "lpd", "make_model", "posterior_predictive", "psis_loo",
    "rhat", "run_chain", "run_chains", "simulate_data", "solve", "solve_with_sensitivities", "summarize",
]
