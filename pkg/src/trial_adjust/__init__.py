"""Covariate-adjusted estimation of treatment effects in randomized trials."""

from .errors import TrialAdjustError
from .estimators import (
    EstimatorKind,
    estimate_effect,
    estimate_means,
    gcomp_means,
    gob_means,
    plugin_first_order_bias,
)
from .glm import (
    LOGIT,
    POISSON,
    LinkFamily,
    TrialData,
    WorkingModelSpec,
    build_design,
    fit_firth,
    fit_mle,
)
from .inference import score_inference, wald_inference
from .variance import empirical_if, theoretical_if, vcov_contrast, vcov_from_if

__version__ = "0.1.0"

__all__ = [
    "TrialAdjustError",
    "EstimatorKind",
    "estimate_effect",
    "estimate_means",
    "gcomp_means",
    "gob_means",
    "plugin_first_order_bias",
    "LOGIT",
    "POISSON",
    "LinkFamily",
    "TrialData",
    "WorkingModelSpec",
    "build_design",
    "fit_firth",
    "fit_mle",
    "score_inference",
    "wald_inference",
    "empirical_if",
    "theoretical_if",
    "vcov_contrast",
    "vcov_from_if",
]
