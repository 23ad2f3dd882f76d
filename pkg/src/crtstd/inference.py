"""Leave-one-cluster-out jackknife inference for standardized estimators.

Each deletion refits the working model on the remaining clusters, recomputes
assignment probabilities under the design restricted to those clusters, and
renormalizes the estimand weights. The variance of the arm-mean pair uses the
(m-1)/m outer-product form around the mean of the deletion estimates; the
reported contrast standard error jackknifes the contrast directly, and the
delta-method alternative from the pair covariance is exposed alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .core import (Contrast, EstimandSpec, TrialData, apply_contrast,
                   contrast_gradient, require_valid, weights)
from .models.base import Family, ModelSpec, make_workspace
from .randomization import RandomizationDesign, assignment_probabilities
from .standardize import cluster_contributions


class JackknifeError(RuntimeError):
    """A leave-one-out refit failed under the hard-error policy."""


@dataclass(frozen=True)
class JackknifeResult:
    loo_estimates: np.ndarray      # (m, 2): deletion estimates of (mu1, mu0)
    sigma_hat: np.ndarray          # 2x2 jackknife covariance of the pair
    contrast_loo: np.ndarray       # (m,) deletion estimates of the contrast
    se_contrast: float
    df: int
    refit_failures: tuple[str, ...]


def loo_assignment_probabilities(design: RandomizationDesign, data: TrialData,
                                 probs: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Assignment probabilities for the retained clusters after one deletion.

    Simple, stratified, and pair-matched probabilities do not depend on which
    clusters are present. For constrained designs the reduced scheme matrix
    drops the deleted column, and a column mean is unaffected by removing a
    different column, so the full-design probabilities can be reused as-is.
    """
    return probs[keep]


@dataclass
class LooSweep:
    """Shared leave-one-out machinery: one model refit per deletion.

    Every consumer (contrast jackknife, informative-cluster-size test,
    simulation harness) walks the same deletions in canonical cluster order
    and extracts what it needs from the per-deletion fit, so the refit work
    is never duplicated across estimands.
    """

    mu_pairs: dict[str, np.ndarray]   # weight-scheme label -> (m, 2) LOO means
    coefs: np.ndarray | None          # (m,) treatment coefficient per deletion
    refit_failures: tuple[str, ...]


def loo_sweep(data: TrialData, design: RandomizationDesign, model_spec: ModelSpec,
              omegas: dict[str, np.ndarray], refit_policy: str = "error",
              collect_coef: bool = False) -> LooSweep:
    m = data.m
    if m < 3:
        raise ValueError(f"jackknife requires at least 3 clusters, got {m}")
    probs = assignment_probabilities(design, data)
    workspace = make_workspace(model_spec, data)
    null_ws = None
    treat = data.treatment
    ybar = data.ybar
    mu_pairs = {label: np.empty((m, 2)) for label in omegas}
    coefs = np.full(m, np.nan) if collect_coef else None
    failures: list[str] = []
    all_idx = np.arange(m)
    for g in range(m):
        keep = np.concatenate([all_idx[:g], all_idx[g + 1:]])
        failed = False
        if model_spec.family is not Family.NULL and len(set(treat[keep])) < 2:
            failed = True
            reason = "single-arm sample"
        if not failed:
            try:
                fitted = workspace.fit(keep=keep)
            except Exception as exc:   # noqa: BLE001 - converted to policy below
                failed = True
                reason = str(exc)
        if failed:
            if refit_policy == "error":
                raise JackknifeError(
                    f"leave-one-out refit failed when deleting cluster "
                    f"{data.cluster_ids[g]}: {reason}")
            failures.append(data.cluster_ids[g])
            if null_ws is None:
                null_ws = make_workspace(ModelSpec(Family.NULL), data)
            ws, fitted = null_ws, null_ws.fit()
        else:
            ws = workspace
        pred1 = ws.predict(fitted, 1)[keep]
        pred0 = ws.predict(fitted, 0)[keep]
        probs_k = loo_assignment_probabilities(design, data, probs, keep)
        c1 = cluster_contributions(ybar[keep], treat[keep], probs_k, pred1, 1)
        c0 = cluster_contributions(ybar[keep], treat[keep], probs_k, pred0, 0)
        for label, omega in omegas.items():
            w = omega[keep]
            w = w / w.sum()
            mu_pairs[label][g, 0] = w @ c1
            mu_pairs[label][g, 1] = w @ c0
        if collect_coef:
            coefs[g] = fitted.coef[1] if fitted.coef.size > 1 else np.nan
    return LooSweep(mu_pairs=mu_pairs, coefs=coefs, refit_failures=tuple(failures))


def pair_covariance(loo: np.ndarray) -> np.ndarray:
    """Jackknife covariance of the (mu1, mu0) pair: (m-1)/m outer products."""
    m = loo.shape[0]
    dev = loo - loo.mean(axis=0)
    return (m - 1) / m * (dev.T @ dev)


def jackknife_se(values: np.ndarray) -> float:
    m = len(values)
    dev = values - values.mean()
    return float(np.sqrt((m - 1) / m * np.sum(dev * dev)))


def jackknife(data: TrialData, design: RandomizationDesign, model_spec: ModelSpec,
              estimand_spec: EstimandSpec, refit_policy: str = "error") -> JackknifeResult:
    """Leave-one-cluster-out variance estimation for one estimand."""
    require_valid(data)
    omega, _ = weights(data, estimand_spec)
    sweep = loo_sweep(data, design, model_spec, {"target": omega},
                      refit_policy=refit_policy)
    loo = sweep.mu_pairs["target"]
    contrast_loo = np.array([apply_contrast(estimand_spec.contrast, mu1, mu0)
                             for mu1, mu0 in loo])
    return JackknifeResult(loo_estimates=loo, sigma_hat=pair_covariance(loo),
                           contrast_loo=contrast_loo,
                           se_contrast=jackknife_se(contrast_loo),
                           df=data.m - 1, refit_failures=sweep.refit_failures)


def t_interval(estimate: float, se: float, m: int, level: float = 0.95,
               ) -> tuple[float, float]:
    """Two-sided t(m-1) interval around the estimate."""
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    if m < 2:
        raise ValueError("t interval needs at least 2 clusters")
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must be in (0,1)")
    half = sps.t.ppf(1.0 - (1.0 - level) / 2.0, m - 1) * se
    return (estimate - half, estimate + half)


def delta_method_se(sigma_hat: np.ndarray, mu1: float, mu0: float,
                    contrast: Contrast) -> float:
    """Standard error of f(mu1, mu0) from the pair covariance via the delta method."""
    grad = contrast_gradient(contrast, mu1, mu0)
    return float(np.sqrt(grad @ sigma_hat @ grad))
