"""Working outcome regression families behind a uniform fit/predict surface."""

from .base import (Convergence, ConvergenceError, Family, FittedWorkingModel,
                   Link, Marginalization, ModelSpec, WorkingCorr, fit, icc,
                   make_workspace, predict_cluster_mean, predict_cluster_means)
from .design import RankError
from .mixed import logistic_normal_mean

__all__ = [
    "Convergence", "ConvergenceError", "Family", "FittedWorkingModel", "Link",
    "Marginalization", "ModelSpec", "WorkingCorr", "RankError", "fit", "icc",
    "logistic_normal_mean", "make_workspace", "predict_cluster_mean",
    "predict_cluster_means",
]
