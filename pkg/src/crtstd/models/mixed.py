"""Random-intercept mixed models fitted on individual-level observations.

The linear mixed model profiles both the fixed effects and the residual
variance out of the (restricted) likelihood, leaving a one-dimensional
safeguarded search over the variance ratio; everything it needs reduces to
per-cluster sufficient statistics, so leave-one-cluster-out refits are cheap.

The generalized linear mixed models (logit and log link) maximize an
adaptive Gauss-Hermite approximation of the marginal likelihood, with the
one-node case coinciding with the Laplace approximation.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, logsumexp

from ..core import TrialData
from . import design as dz
from .base import (Convergence, ConvergenceError, Family, FittedWorkingModel,
                   Marginalization, ModelSpec)

_VAR_FLOOR = 1e-10     # variance components below this are clamped to zero
_ETA_CLIP = 700.0      # linked predictors are clipped here before exponentiation


class LmmWorkspace:
    """Random-intercept linear mixed model, ML by default, REML optional."""

    def __init__(self, spec: ModelSpec, data: TrialData):
        self.spec = spec
        self.data = data
        self.info = dz.design_info(data, cluster_level=False, adjusted=spec.adjusted,
                                   contextual=spec.contextual, include_size=spec.include_size)
        self._rows = dz.row_design(data, self.info)
        self.stats = dz.cluster_stats(self._rows, data.y, data.starts, data.sizes)
        self.zbar = dz.cluster_mean_design(data, self.info)
        self._rank_checked = False

    def fit(self, keep: np.ndarray | None = None, compute_cov: bool = False) -> FittedWorkingModel:
        if keep is None and not self._rank_checked:
            dz.check_full_rank(self._rows, "linear mixed model")
            self._rank_checked = True
        st = self.stats
        sl = slice(None) if keep is None else keep
        xtx, xsum, xty = st.xtx[sl], st.xsum[sl], st.xty[sl]
        ysum, yss, n = st.ysum[sl], st.yss[sl], st.n[sl]
        p = xtx.shape[1]
        ntot = float(n.sum())
        dof = ntot - p if self.spec.reml else ntot
        xtx_tot = xtx.sum(axis=0)
        xty_tot = xty.sum(axis=0)
        yss_tot = float(yss.sum())
        evals = 0

        def profile(theta: float):
            c = theta / (1.0 + theta * n)
            a = xtx_tot - np.einsum("i,ip,iq->pq", c, xsum, xsum)
            b = xty_tot - (c * ysum) @ xsum
            try:
                coef = np.linalg.solve(a, b)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError("singular GLS system in mixed-model profile") from exc
            rss = yss_tot - (c * ysum**2).sum() - coef @ b
            rss = max(rss, 1e-300)
            obj = float(np.sum(np.log1p(theta * n))) + dof * np.log(rss / dof)
            if self.spec.reml:
                obj += np.linalg.slogdet(a)[1]
            return obj, coef, rss

        def objective(u: float) -> float:
            nonlocal evals
            evals += 1
            return profile(np.exp(u))[0]

        res = minimize_scalar(objective, bounds=(np.log(1e-10), np.log(1e6)),
                              method="bounded", options={"xatol": 1e-9})
        theta = float(np.exp(res.x))
        obj0, _, _ = profile(0.0)
        boundary = False
        if obj0 <= res.fun:
            theta, boundary = 0.0, True
        obj, coef, rss = profile(theta)
        sigma_e2 = rss / dof
        sigma_b2 = theta * sigma_e2
        if 0.0 < sigma_b2 < _VAR_FLOOR:
            theta, boundary = 0.0, True
            obj, coef, rss = profile(0.0)
            sigma_e2, sigma_b2 = rss / dof, 0.0
        vc = {"sigma_b2": float(sigma_b2), "sigma_e2": float(sigma_e2)}
        conv = Convergence(converged=True, iterations=evals, criterion=0.0, boundary=boundary)
        return FittedWorkingModel(self.spec, coef=coef, coef_names=self.info.names,
                                  variance_components=vc, convergence=conv)

    def predict(self, model: FittedWorkingModel, a: int) -> np.ndarray:
        # Within-cluster deviation terms average to zero, leaving the
        # fixed-effect predictor at the cluster means.
        c = self.info.a_col
        eta0 = self.zbar @ model.coef - self.zbar[:, c] * model.coef[c]
        return eta0 + a * model.coef[c]


class _BernoulliLogit:
    outcome_domain = "binary"

    @staticmethod
    def check_outcomes(y):
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("logistic mixed model requires outcomes in {0, 1}")

    @staticmethod
    def loglik(y, eta):
        return y * eta - np.logaddexp(0.0, eta)

    mean = staticmethod(expit)

    @staticmethod
    def dmu(eta):
        mu = expit(eta)
        return mu * (1.0 - mu)


class _PoissonLog:
    outcome_domain = "nonnegative"

    @staticmethod
    def check_outcomes(y):
        if np.any(y < 0):
            raise ValueError("log-link mixed model requires nonnegative outcomes")

    @staticmethod
    def loglik(y, eta):
        return y * eta - np.exp(np.clip(eta, None, 50.0))

    @staticmethod
    def mean(eta):
        return np.exp(np.clip(eta, None, 50.0))

    dmu = mean


class GlmmWorkspace:
    """Random-intercept GLMM maximized with adaptive Gauss-Hermite quadrature."""

    def __init__(self, spec: ModelSpec, data: TrialData):
        self.spec = spec
        self.data = data
        self.fam = _BernoulliLogit if spec.family is Family.GLMM_LOGIT else _PoissonLog
        self.fam.check_outcomes(data.y)
        self.info = dz.design_info(data, cluster_level=False, adjusted=spec.adjusted,
                                   contextual=spec.contextual, include_size=spec.include_size)
        self.rows = dz.row_design(data, self.info)
        self._rank_checked = False
        t, w = hermgauss(spec.likelihood_nodes)
        self._nodes_t, self._nodes_logw = t, np.log(w)

    def _subset(self, keep: np.ndarray | None):
        data = self.data
        if keep is None:
            return self.rows, data.y, data.starts[:-1], data.sizes.astype(float), data.row_cluster
        keep = np.asarray(keep)
        mask = np.zeros(data.m, dtype=bool)
        mask[keep] = True
        rowmask = mask[data.row_cluster]
        sizes = data.sizes[keep].astype(float)
        starts = np.concatenate([[0], np.cumsum(sizes[:-1].astype(np.int64))])
        local = np.repeat(np.arange(len(keep)), sizes.astype(np.int64))
        return self.rows[rowmask], data.y[rowmask], starts, sizes, local

    def _nll_builder(self, rows, y, starts, sizes, rowcl):
        m = len(sizes)
        warm = {"b": np.zeros(m)}
        t, logw = self._nodes_t, self._nodes_logw
        fam = self.fam

        def nll(params: np.ndarray) -> float:
            beta, lnsg = params[:-1], params[-1]
            sg2 = float(np.exp(2.0 * lnsg))
            base = rows @ beta
            b = warm["b"].copy()
            h = None
            for _ in range(60):
                eta = base + b[rowcl]
                s1 = np.add.reduceat(y - fam.mean(eta), starts)
                h = np.add.reduceat(fam.dmu(eta), starts)
                step = (s1 - b / sg2) / (h + 1.0 / sg2)
                np.clip(step, -10.0, 10.0, out=step)
                b += step
                if np.max(np.abs(step)) < 1e-10:
                    break
            warm["b"] = b
            tau = 1.0 / np.sqrt(h + 1.0 / sg2)
            log_terms = np.empty((len(t), m))
            for k, (tk, lwk) in enumerate(zip(t, logw)):
                bk = b + np.sqrt(2.0) * tau * tk
                eta = base + bk[rowcl]
                cl = np.add.reduceat(fam.loglik(y, eta), starts)
                log_terms[k] = lwk + tk * tk + cl - bk * bk / (2.0 * sg2) \
                    - 0.5 * np.log(2.0 * np.pi * sg2)
            logl = np.log(np.sqrt(2.0) * tau) + logsumexp(log_terms, axis=0)
            return -float(logl.sum())

        return nll

    def fit(self, keep: np.ndarray | None = None, compute_cov: bool = False) -> FittedWorkingModel:
        if keep is None and not self._rank_checked:
            dz.check_full_rank(self.rows, "generalized linear mixed model")
            self._rank_checked = True
        rows, y, starts, sizes, rowcl = self._subset(keep)
        nll = self._nll_builder(rows, y, starts, sizes, rowcl)
        beta0 = _glm_irls(rows, y, self.fam)
        x0 = np.concatenate([beta0, [np.log(0.5)]])
        bounds = [(None, None)] * len(beta0) + [(-14.0, 3.0)]
        res = minimize(nll, x0, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-7})
        gnorm = float(np.max(np.abs(res.jac)))
        if not res.success and gnorm > 1e-3 * max(1.0, abs(res.fun)):
            raise ConvergenceError(f"mixed-model likelihood did not converge ({res.message})")
        coef = res.x[:-1]
        sg2 = float(np.exp(2.0 * res.x[-1]))
        boundary = sg2 < _VAR_FLOOR
        if boundary:
            sg2 = 0.0
        key = "sigma_c2" if self.spec.family is Family.GLMM_LOGIT else "sigma_d2"
        cov = None
        if compute_cov:
            hess = _numerical_hessian(nll, res.x)
            full = np.linalg.inv(hess)
            cov = full[:-1, :-1]
        conv = Convergence(converged=True, iterations=int(res.nit),
                           criterion=gnorm, boundary=boundary)
        return FittedWorkingModel(self.spec, coef=coef, coef_names=self.info.names,
                                  variance_components={key: sg2},
                                  convergence=conv, coef_cov=cov)

    def predict(self, model: FittedWorkingModel, a: int) -> np.ndarray:
        c = self.info.a_col
        eta0 = self.rows @ model.coef - self.rows[:, c] * model.coef[c]
        eta = eta0 + a * model.coef[c]
        vc = model.variance_components
        if self.spec.family is Family.GLMM_LOG:
            shifted = np.clip(eta + vc["sigma_d2"] / 2.0, -_ETA_CLIP, _ETA_CLIP)
            per_row = np.exp(shifted)
        elif self.spec.marginalization is Marginalization.HEDEKER:
            scale = np.sqrt((vc["sigma_c2"] + np.pi**2 / 3.0) / (np.pi**2 / 3.0))
            per_row = expit(eta / scale)
        else:
            per_row = logistic_normal_mean(eta, vc["sigma_c2"], self.spec.prediction_nodes)
        sums = np.add.reduceat(per_row, self.data.starts[:-1])
        return sums / self.data.sizes


def logistic_normal_mean(eta: np.ndarray, sigma2: float, nodes: int) -> np.ndarray:
    """Gauss-Hermite value of the logistic-normal integral for each predictor."""
    if sigma2 <= 0.0:
        return expit(eta)
    t, w = hermgauss(nodes)
    shift = np.sqrt(2.0 * sigma2) * t
    out = np.zeros_like(eta, dtype=float)
    for tk, wk in zip(shift, w):
        out += wk * expit(eta + tk)
    return out / np.sqrt(np.pi)


def _glm_irls(rows: np.ndarray, y: np.ndarray, fam, max_iter: int = 50) -> np.ndarray:
    """Independence GLM fit used for starting values."""
    k = rows.shape[1]
    coef = np.zeros(k)
    mbar = float(np.clip(y.mean(), 1e-6, None))
    coef[0] = np.log(mbar / (1 - mbar)) if fam is _BernoulliLogit else np.log(mbar)
    for _ in range(max_iter):
        eta = np.clip(rows @ coef, -30.0, 30.0)
        mu = fam.mean(eta)
        w = np.maximum(fam.dmu(eta), 1e-12)
        z = eta + (y - mu) / w
        wx = rows * w[:, None]
        try:
            new = np.linalg.solve(wx.T @ rows, wx.T @ z)
        except np.linalg.LinAlgError:
            break
        if np.max(np.abs(new - coef)) < 1e-10 * max(1.0, np.max(np.abs(new))):
            coef = new
            break
        coef = new
    return coef


def _numerical_hessian(f, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    k = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    hess = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            def shifted(si, sj):
                z = x.copy()
                z[i] += si * h[i]
                z[j] += sj * h[j]
                return f(z)
            if i == j:
                val = (shifted(1, 0) - 2.0 * f(x) + shifted(-1, 0)) / h[i] ** 2
            else:
                val = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) \
                    / (4.0 * h[i] * h[j])
            hess[i, j] = hess[j, i] = val
    return hess
