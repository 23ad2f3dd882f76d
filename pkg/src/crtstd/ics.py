"""Model-robust test for informative cluster size.

The null is that the cluster-average and individual-average effects coincide.
The statistic contrasts the two standardized estimates (on the difference
scale, or after a log / log-odds transform for ratio-type estimands), scaled
by a leave-one-cluster-out jackknife variance; both estimators inside each
deletion reuse the same model refit, since the working model does not depend
on the weighting scheme. Reference distribution: t with m-1 degrees of
freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .core import (Contrast, EstimandSpec, EstimationError, TrialData,
                   WeightScheme, apply_contrast, require_valid, weights)
from .inference import jackknife_se, loo_sweep
from .models.base import ModelSpec, fit as fit_model, predict_cluster_means
from .randomization import RandomizationDesign, assignment_probabilities
from .standardize import standardized_means


@dataclass(frozen=True)
class IcsTestResult:
    d_hat: float
    v_hat: float
    statistic: float
    df: int
    p_value: float
    scale: Contrast
    delta_c: float
    delta_i: float
    d_loo: np.ndarray


def ics_test(data: TrialData, design: RandomizationDesign, model_spec: ModelSpec,
             scale: Contrast = Contrast.DIFFERENCE,
             refit_policy: str = "error") -> IcsTestResult:
    """Test whether the cluster-average and individual-average effects differ."""
    require_valid(data)
    if data.m < 3:
        raise ValueError(f"informative-cluster-size test requires at least 3 clusters, "
                         f"got {data.m}")
    probs = assignment_probabilities(design, data)
    omega_c, _ = weights(data, EstimandSpec(WeightScheme.CLUSTER))
    omega_i, _ = weights(data, EstimandSpec(WeightScheme.INDIVIDUAL))
    model = fit_model(model_spec, data)
    preds = (predict_cluster_means(model, data, 1), predict_cluster_means(model, data, 0))
    means_c = standardized_means(data, omega_c, probs, model, predictions=preds)
    means_i = standardized_means(data, omega_i, probs, model, predictions=preds)
    delta_c = apply_contrast(scale, means_c.mu1, means_c.mu0)
    delta_i = apply_contrast(scale, means_i.mu1, means_i.mu0)
    d_hat = delta_c - delta_i

    sweep = loo_sweep(data, design, model_spec,
                      {"c": omega_c, "i": omega_i}, refit_policy=refit_policy)
    loo_c, loo_i = sweep.mu_pairs["c"], sweep.mu_pairs["i"]
    d_loo = np.array([apply_contrast(scale, c1, c0) - apply_contrast(scale, i1, i0)
                      for (c1, c0), (i1, i0) in zip(loo_c, loo_i)])
    m = data.m
    v_hat = jackknife_se(d_loo) ** 2
    if v_hat == 0.0:
        if d_hat != 0.0:
            raise EstimationError("degenerate jackknife: zero variance with a "
                                  "nonzero informative-cluster-size contrast")
        statistic, p_value = 0.0, 1.0
    else:
        statistic = d_hat / np.sqrt(v_hat)
        p_value = float(2.0 * sps.t.sf(abs(statistic), m - 1))
    return IcsTestResult(d_hat=float(d_hat), v_hat=float(v_hat), statistic=float(statistic),
                         df=m - 1, p_value=p_value, scale=scale,
                         delta_c=float(delta_c), delta_i=float(delta_i), d_loo=d_loo)


def ics_covariance_diagnostic(data: TrialData) -> float:
    """Sample covariance between cluster size and the cluster's IPW contrast term.

    Descriptive difference-scale companion to the test: informative cluster
    size manifests as a nonzero covariance between size and the
    cluster-specific treatment contrast. Uses the empirical arm share as the
    assignment probability; no model is involved.
    """
    require_valid(data)
    treat = data.treatment.astype(float)
    pi_hat = treat.mean()
    if pi_hat in (0.0, 1.0):
        raise ValueError("diagnostic needs at least one cluster in each arm")
    contrib = treat * data.ybar / pi_hat - (1.0 - treat) * data.ybar / (1.0 - pi_hat)
    n = data.sizes.astype(float)
    if data.m < 2:
        return 0.0
    return float(np.cov(n, contrib, ddof=1)[0, 1])
