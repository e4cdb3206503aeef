"""Multi-study factor analysis.

Maximum likelihood estimation (ECM) of factor loadings shared by several
studies alongside loadings specific to each study, together with
latent-dimension selection, simulation and cross-study evaluation tools.
"""

from .ecm import FitConfig, compute_estep_stats, fit_fa, fit_msfa
from .evaluation import (
    align_loadings,
    cv_mse,
    loading_correlations,
    posterior_scores,
    reconstruct,
    rv_coefficient,
)
from .exceptions import (
    FeasibilityError,
    FormatError,
    MsfaError,
    NumericError,
    PreconditionError,
)
from .model import (
    FactorDims,
    FitResult,
    MsfaParams,
    StudyDataset,
    assemble_sigma,
    free_param_count,
    log_likelihood,
    validate_dims,
)
from .selection import horn_parallel_analysis, lrt, select_k
from .simulation import ScenarioSpec, generate_true_params, scenario, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "FitConfig",
    "compute_estep_stats",
    "fit_fa",
    "fit_msfa",
    "align_loadings",
    "cv_mse",
    "loading_correlations",
    "posterior_scores",
    "reconstruct",
    "rv_coefficient",
    "FeasibilityError",
    "FormatError",
    "MsfaError",
    "NumericError",
    "PreconditionError",
    "FactorDims",
    "FitResult",
    "MsfaParams",
    "StudyDataset",
    "assemble_sigma",
    "free_param_count",
    "log_likelihood",
    "validate_dims",
    "horn_parallel_analysis",
    "lrt",
    "select_k",
    "ScenarioSpec",
    "generate_true_params",
    "scenario",
    "simulate_dataset",
]
