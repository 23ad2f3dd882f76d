"""Model-robust standardization for cluster-randomized trials.

Standardizes the output of any fitted working regression model into
consistent estimators of cluster-average and individual-average treatment
effects, with leave-one-cluster-out jackknife inference, a test for
informative cluster size, and a reproducible simulation harness.
"""

from .core import (CLUSTER_ATE, INDIVIDUAL_ATE, ClusterRecord, ClusterSummary,
                   Contrast, ContrastValue, EstimandSpec, EstimationError,
                   TrialData, ValidationError, WeightScheme, apply_contrast,
                   summarize, validate, weights)
from .ics import IcsTestResult, ics_covariance_diagnostic, ics_test
from .inference import (JackknifeError, JackknifeResult, delta_method_se,
                        jackknife, t_interval)
from .models import (ConvergenceError, Family, FittedWorkingModel, Link,
                     Marginalization, ModelSpec, WorkingCorr, fit, icc,
                     predict_cluster_mean, predict_cluster_means)
from .randomization import (DesignVariant, PositivityError, RandomizationDesign,
                            assignment_probabilities, balanced_constrained_check,
                            constrained, load_scheme_matrix, pair_matched,
                            simple, stratified)
from .standardize import (EstimationResult, StandardizedMeans, contrast,
                          estimate, standardized_means)

__version__ = "0.1.0"

__all__ = [
    "CLUSTER_ATE", "INDIVIDUAL_ATE", "ClusterRecord", "ClusterSummary",
    "Contrast", "ContrastValue", "ConvergenceError", "DesignVariant",
    "EstimandSpec", "EstimationError", "EstimationResult", "Family",
    "FittedWorkingModel", "IcsTestResult", "JackknifeError", "JackknifeResult",
    "Link", "Marginalization", "ModelSpec", "PositivityError",
    "RandomizationDesign", "StandardizedMeans", "TrialData", "ValidationError",
    "WeightScheme", "WorkingCorr", "apply_contrast", "assignment_probabilities",
    "balanced_constrained_check", "constrained", "contrast", "delta_method_se",
    "estimate", "fit", "icc", "ics_covariance_diagnostic", "ics_test",
    "jackknife", "load_scheme_matrix", "pair_matched", "predict_cluster_mean",
    "predict_cluster_means", "simple", "standardized_means", "stratified",
    "summarize", "t_interval", "validate", "weights", "__version__",
]
