"""Cluster-level working models: mean regression and logit-link quasi-regression.

Both operate on cluster summaries (outcome means, covariate means, size). The
logit variant pairs a logistic mean with a constant working variance, so it is
plain nonlinear least squares fitted by iteratively reweighted least squares
with step halving; cluster proportions of 0 or 1 are unproblematic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..core import TrialData
from . import design as dz
from .base import Convergence, ConvergenceError, Family, FittedWorkingModel, ModelSpec


class ClusterWorkspace:
    def __init__(self, spec: ModelSpec, data: TrialData):
        self.spec = spec
        self.data = data
        self.info = dz.design_info(data, cluster_level=True, adjusted=spec.adjusted,
                                   contextual=False, include_size=spec.include_size)
        self.z = dz.cluster_design(data, self.info)
        self.y = data.ybar
        self._rank_checked = False

    def fit(self, keep: np.ndarray | None = None, compute_cov: bool = False) -> FittedWorkingModel:
        if keep is None and not self._rank_checked:
            dz.check_full_rank(self.z, f"{self.spec.family.value} model")
            self._rank_checked = True
        z = self.z if keep is None else self.z[keep]
        y = self.y if keep is None else self.y[keep]
        if self.spec.family is Family.CLUSTER_LM:
            return self._fit_ols(z, y, compute_cov)
        return self._fit_logit_lsq(z, y, compute_cov)

    def _fit_ols(self, z, y, compute_cov):
        coef, _, rank, _ = np.linalg.lstsq(z, y, rcond=None)
        if rank < z.shape[1]:
            raise dz.RankError("rank-deficient design in cluster-level regression")
        cov = None
        if compute_cov:
            cov = _hc1_sandwich(z, y - z @ coef)
        return FittedWorkingModel(self.spec, coef=coef, coef_names=self.info.names,
                                  coef_cov=cov)

    def _fit_logit_lsq(self, z, y, compute_cov):
        # Least squares with a logistic mean: minimize sum (y - expit(z b))^2.
        k = z.shape[1]
        coef = np.zeros(k)
        ym = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        coef[0] = np.log(ym / (1 - ym))
        rss = _logit_rss(z, y, coef)
        it = 0
        change = np.inf
        for it in range(1, self.spec.max_iter + 1):
            mu = expit(z @ coef)
            w = mu * (1 - mu)
            zw = z * w[:, None]
            try:
                step = np.linalg.solve(zw.T @ zw, zw.T @ (y - mu))
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError("singular weighted design in cluster logit fit") from exc
            # Halve until the residual sum of squares stops increasing.
            lam, new = 1.0, None
            for _ in range(30):
                cand = coef + lam * step
                new = _logit_rss(z, y, cand)
                if new <= rss + 1e-14:
                    break
                lam /= 2
            coef = coef + lam * step
            change = np.max(np.abs(lam * step)) / max(1.0, np.max(np.abs(coef)))
            rss = new
            if change < self.spec.tol:
                break
        else:
            raise ConvergenceError(f"cluster logit fit did not converge "
                                   f"in {self.spec.max_iter} iterations")
        cov = None
        if compute_cov:
            mu = expit(z @ coef)
            w = (mu * (1 - mu)) ** 2
            dof = max(z.shape[0] - k, 1)
            disp = float(np.sum((y - mu) ** 2)) / dof
            cov = disp * np.linalg.inv(z.T @ (z * w[:, None]))
        return FittedWorkingModel(self.spec, coef=coef, coef_names=self.info.names,
                                  convergence=Convergence(True, it, change), coef_cov=cov)

    def predict(self, model: FittedWorkingModel, a: int) -> np.ndarray:
        eta0 = self.z @ model.coef - self.z[:, self.info.a_col] * model.coef[self.info.a_col]
        eta = eta0 + a * model.coef[self.info.a_col]
        if self.spec.family is Family.CLUSTER_LM:
            return eta
        return expit(np.clip(eta, -700, 700))


def _logit_rss(z, y, coef) -> float:
    return float(np.sum((y - expit(z @ coef)) ** 2))


def _hc1_sandwich(z: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """Heteroskedasticity-robust covariance with the (k/(k-p)) small-sample factor."""
    k, p = z.shape
    bread = np.linalg.inv(z.T @ z)
    meat = (z * resid[:, None] ** 2).T @ z
    return k / max(k - p, 1) * bread @ meat @ bread
