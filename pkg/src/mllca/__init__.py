"""Simple and multilevel latent class analysis with two-stage estimation.

Binary indicators, nonparametric group-level mixtures, pseudo-ML stepwise
fitting, information-criterion model selection (including TIC), entropy-based
class separation, nonparametric bootstrap standard errors, and a generative
simulator that doubles as a verification oracle.
"""

from .criteria import aic, bic, entropy_r2, tic, tic_details
from .em import FitConfig, FitResult, fit_one_stage, fit_step1, fit_step2a, fit_step2b, fit_step3
from .errors import ConfigError, DataError, EstimationError, MllcaError
from .model import (
    LOGIT_BOUND,
    FitSummary,
    MeasurementParams,
    PosteriorTables,
    ResponseData,
    StructuralParams,
    class_prob_high,
    class_prob_low,
    count_parameters,
    group_loglik,
    item_response_prob,
    posterior_tables,
    total_loglik,
)
from .simulate import GenerativeSpec, SimulatedData, enumeration_loglik, simulate

__version__ = "0.1.0"

__all__ = [
    "LOGIT_BOUND",
    "ConfigError",
    "DataError",
    "EstimationError",
    "FitConfig",
    "FitResult",
    "FitSummary",
    "GenerativeSpec",
    "MeasurementParams",
    "MllcaError",
    "PosteriorTables",
    "ResponseData",
    "SimulatedData",
    "StructuralParams",
    "aic",
    "bic",
    "class_prob_high",
    "class_prob_low",
    "count_parameters",
    "entropy_r2",
    "enumeration_loglik",
    "fit_one_stage",
    "fit_step1",
    "fit_step2a",
    "fit_step2b",
    "fit_step3",
    "group_loglik",
    "item_response_prob",
    "posterior_tables",
    "simulate",
    "tic",
    "tic_details",
    "total_loglik",
    "__version__",
]
