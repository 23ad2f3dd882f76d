"""Model-robust standardization of fitted working models.

For each arm, the standardized mean is the weighted average over clusters of
(regression prediction + inverse-probability-weighted cluster-level
residual). Setting the prediction to zero recovers the unadjusted two-sample
weighted estimator, and the weighting scheme alone switches the target
between the cluster-average and individual-average effects; there is a
single code path for every weight choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Contrast, ContrastValue, EstimandSpec, EstimationError,
                   TrialData, apply_contrast, require_valid, weights)
from .models.base import FittedWorkingModel, ModelSpec, fit as fit_model
from .randomization import RandomizationDesign, assignment_probabilities


@dataclass(frozen=True)
class StandardizedMeans:
    """Standardized mean outcomes under each arm plus per-cluster contributions."""

    mu1: float
    mu0: float
    contributions1: np.ndarray
    contributions0: np.ndarray


def cluster_contributions(ybar: np.ndarray, treat: np.ndarray, probs: np.ndarray,
                          pred: np.ndarray, a: int) -> np.ndarray:
    """Per-cluster term: prediction plus weighted residual for the observed arm."""
    denom = probs if a == 1 else 1.0 - probs
    indicator = (treat == a).astype(float)
    with np.errstate(invalid="ignore", over="ignore"):
        # non-finite predictions are reported by the caller, not here
        return pred + indicator * (ybar - pred) / denom


def standardized_means(data: TrialData, omega: np.ndarray, probs: np.ndarray,
                       model: FittedWorkingModel,
                       predictions: tuple[np.ndarray, np.ndarray] | None = None,
                       ) -> StandardizedMeans:
    """Standardize a fitted working model into arm-specific mean estimates.

    ``predictions`` may carry precomputed (arm-1, arm-0) cluster-mean
    predictions to avoid refitting workspaces inside resampling loops.
    """
    if predictions is None:
        from .models.base import predict_cluster_means
        predictions = (predict_cluster_means(model, data, 1),
                       predict_cluster_means(model, data, 0))
    total = float(omega.sum())
    if total <= 0:
        raise ValueError("empty weighted population (all weights zero)")
    w = omega / total
    c1 = cluster_contributions(data.ybar, data.treatment, probs, predictions[0], 1)
    c0 = cluster_contributions(data.ybar, data.treatment, probs, predictions[1], 0)
    for c, label in ((c1, "treated"), (c0, "control")):
        bad = np.flatnonzero(~np.isfinite(c))
        if bad.size:
            raise EstimationError(
                f"non-finite {label}-arm contribution for cluster "
                f"{data.cluster_ids[int(bad[0])]}")
    return StandardizedMeans(mu1=float(w @ c1), mu0=float(w @ c0),
                             contributions1=c1, contributions0=c0)


def contrast(means: StandardizedMeans, spec: EstimandSpec) -> ContrastValue:
    return ContrastValue(apply_contrast(spec.contrast, means.mu1, means.mu0), spec.contrast)


@dataclass(frozen=True)
class EstimationResult:
    """Point estimate with jackknife inference and model diagnostics."""

    estimate: ContrastValue
    se: float
    ci: tuple[float, float]
    df: int
    mu1: float
    mu0: float
    sigma_hat: np.ndarray           # jackknife covariance of (mu1, mu0)
    se_delta_method: float
    model: FittedWorkingModel
    icc: float | tuple[float, float] | None
    refit_failures: tuple[str, ...]


def estimate(data: TrialData, design: RandomizationDesign, model_spec: ModelSpec,
             estimand_spec: EstimandSpec, level: float = 0.95,
             refit_policy: str = "error") -> EstimationResult:
    """Full pipeline: validate, assignment probabilities, fit, standardize, jackknife."""
    from .inference import delta_method_se, jackknife, t_interval
    from .models.base import icc as model_icc

    def staged(stage, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise type(exc)(f"[{stage}] {exc}") from exc

    staged("validate", require_valid, data)
    probs = staged("randomization", assignment_probabilities, design, data)
    omega, _ = staged("weights", weights, data, estimand_spec)
    model = staged("fit", fit_model, model_spec, data)
    means = staged("standardize", standardized_means, data, omega, probs, model)
    point = staged("contrast", contrast, means, estimand_spec)
    jk = staged("jackknife", jackknife, data, design, model_spec, estimand_spec,
                refit_policy=refit_policy)
    ci = t_interval(point.estimate, jk.se_contrast, data.m, level)
    try:
        icc_val = model_icc(model)
    except ValueError:
        icc_val = None
    dm = delta_method_se(jk.sigma_hat, means.mu1, means.mu0, estimand_spec.contrast)
    return EstimationResult(estimate=point, se=jk.se_contrast, ci=ci, df=data.m - 1,
                            mu1=means.mu1, mu0=means.mu0, sigma_hat=jk.sigma_hat,
                            se_delta_method=dm, model=model, icc=icc_val,
                            refit_failures=jk.refit_failures)
