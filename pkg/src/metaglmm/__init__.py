"""Random-effects meta-analysis of aggregate data under generalized linear mixed models."""

from .data import Dataset, StudyRecord, expand_two_arm, load_bundled, load_csv, plugin_dispersion, write_csv
from .family import BINOMIAL, GAMMA, NORMAL, POISSON, FamilySpec, Kind, Link
from .fit import ConstrainedFit, ModelFit, fit_constrained, fit_mle, total_loglik
from .inference import (
    BoundStatus,
    IntervalResult,
    Method,
    bartlett_C,
    confidence_interval,
    confidence_intervals,
    corrected_lr,
    profile_lr,
    within_study_variances,
)
from .nn import NNInput, dl_estimate, log_or_bias_oracle, nn_plbc_interval, wald_test
from .qmc import NodeSet, marginal_loglik_study, sobol_nodes

__version__ = "0.1.0"

__all__ = [
    "BINOMIAL", "GAMMA", "NORMAL", "POISSON", "FamilySpec", "Kind", "Link",
    "Dataset", "StudyRecord", "expand_two_arm", "load_bundled", "load_csv", "plugin_dispersion", "write_csv",
    "NodeSet", "marginal_loglik_study", "sobol_nodes",
    "ConstrainedFit", "ModelFit", "fit_constrained", "fit_mle", "total_loglik",
    "BoundStatus", "IntervalResult", "Method", "bartlett_C", "confidence_interval", "confidence_intervals",
    "corrected_lr", "profile_lr", "within_study_variances",
    "NNInput", "dl_estimate", "log_or_bias_oracle", "nn_plbc_interval", "wald_test",
]
