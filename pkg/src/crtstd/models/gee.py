"""Marginal models fitted by generalized estimating equations.

Fisher scoring with an exchangeable, arm-specific exchangeable, or
independence working correlation. The working correlation parameter is
re-estimated each iteration by the pairwise moment estimator on Pearson
residuals, with the dispersion from the residual sum of squares. The
exchangeable inverse is applied analytically, so no working covariance
matrix is ever formed during fitting; dense per-cluster matrices appear only
in the bias-corrected sandwich covariance.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..core import TrialData
from . import design as dz
from .base import (Convergence, ConvergenceError, FittedWorkingModel, Link,
                   ModelSpec, WorkingCorr)


class _Identity:
    @staticmethod
    def mean(eta):
        return eta

    @staticmethod
    def dmu(eta):
        return np.ones_like(eta)

    @staticmethod
    def var(mu):
        return np.ones_like(mu)


class _Logit:
    mean = staticmethod(expit)

    @staticmethod
    def dmu(eta):
        mu = expit(eta)
        return mu * (1.0 - mu)

    @staticmethod
    def var(mu):
        return np.maximum(mu * (1.0 - mu), 1e-12)


class _Log:
    @staticmethod
    def mean(eta):
        return np.exp(np.clip(eta, None, 50.0))

    dmu = mean

    @staticmethod
    def var(mu):
        return np.maximum(mu, 1e-12)


_LINKS = {Link.IDENTITY: _Identity, Link.LOGIT: _Logit, Link.LOG: _Log}


class GeeWorkspace:
    def __init__(self, spec: ModelSpec, data: TrialData):
        self.spec = spec
        self.data = data
        self.link = _LINKS[spec.link]
        self.info = dz.design_info(data, cluster_level=False, adjusted=spec.adjusted,
                                   contextual=spec.contextual, include_size=spec.include_size)
        self.rows = dz.row_design(data, self.info)
        self.zbar = dz.cluster_mean_design(data, self.info)
        self._rank_checked = False
        if spec.link is Link.IDENTITY:
            self.stats = dz.cluster_stats(self.rows, data.y, data.starts, data.sizes)

    # -- fitting ---------------------------------------------------------

    def fit(self, keep: np.ndarray | None = None, compute_cov: bool = False) -> FittedWorkingModel:
        if keep is None and not self._rank_checked:
            dz.check_full_rank(self.rows, "marginal model")
            self._rank_checked = True
        if self.spec.link is Link.IDENTITY:
            fitted = self._fit_identity(keep)
        else:
            fitted = self._fit_rows(keep)
        if compute_cov:
            cov = self._mancl_derouen(fitted, keep)
            fitted = FittedWorkingModel(fitted.spec, fitted.coef, fitted.coef_names,
                                        fitted.variance_components, fitted.convergence,
                                        coef_cov=cov)
        return fitted

    def _rho_bounds(self, n: np.ndarray) -> tuple[float, float]:
        nmax = float(n.max())
        lo = -1.0 / (nmax - 1.0) + 1e-8 if nmax > 1 else -1e-8
        return lo, 1.0 - 1e-8

    def _moment_rho(self, s: np.ndarray, q: np.ndarray, n: np.ndarray, phi: float,
                    arm: np.ndarray | None):
        """Pairwise-product ICC estimate from per-cluster Pearson residual sums.

        ``s`` and ``q`` are the per-cluster sum and sum of squares of Pearson
        residuals; pairs within a cluster contribute (s^2 - q) / 2.
        """
        lo, hi = self._rho_bounds(n)
        pairs = (s * s - q) / 2.0
        npairs = n * (n - 1.0) / 2.0

        def est(mask):
            denom = float(npairs[mask].sum()) * phi
            if denom <= 0.0:
                return 0.0, False
            raw = float(pairs[mask].sum()) / denom
            clamped = raw < lo or raw > hi
            return float(np.clip(raw, lo, hi)), clamped

        if arm is None:
            return est(np.ones(len(n), dtype=bool))
        r0, c0 = est(arm == 0)
        r1, c1 = est(arm == 1)
        return (r0, r1), (c0 or c1)

    def _fit_identity(self, keep):
        st = self.stats
        sl = slice(None) if keep is None else keep
        xtx, xsum, xty = st.xtx[sl], st.xsum[sl], st.xty[sl]
        ysum, yss, n = st.ysum[sl], st.yss[sl], st.n[sl]
        arm = self.data.treatment[sl].astype(float)
        p = xtx.shape[1]
        ntot = float(n.sum())
        corr = self.spec.working_corr
        xtx_tot, xty_tot = xtx.sum(axis=0), xty.sum(axis=0)

        def solve_beta(rho_c: np.ndarray):
            c = rho_c / (1.0 - rho_c + rho_c * n)
            a = xtx_tot - np.einsum("i,ip,iq->pq", c, xsum, xsum)
            b = xty_tot - (c * ysum) @ xsum
            return np.linalg.solve(a, b)

        try:
            coef = solve_beta(np.zeros(len(n)))
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular system in marginal-model fit") from exc
        rho_val, clamped = 0.0, False
        it, change = 0, 0.0
        if corr is not WorkingCorr.INDEPENDENCE:
            for it in range(1, self.spec.max_iter + 1):
                s = ysum - xsum @ coef
                q = yss - 2.0 * (xty @ coef) + np.einsum("ipq,p,q->i", xtx, coef, coef)
                phi = float(q.sum()) / max(ntot - p, 1.0)
                rho_val, clamped = self._moment_rho(s / np.sqrt(phi), q / phi, n, 1.0,
                                                    arm if corr is WorkingCorr.ARM_EXCHANGEABLE
                                                    else None)
                rho_c = (np.where(arm == 1, rho_val[1], rho_val[0])
                         if corr is WorkingCorr.ARM_EXCHANGEABLE
                         else np.full(len(n), rho_val))
                new = solve_beta(rho_c)
                change = float(np.max(np.abs(new - coef)) / max(1.0, np.max(np.abs(new))))
                coef = new
                if change < self.spec.tol:
                    break
            else:
                raise ConvergenceError(
                    f"GEE did not converge in {self.spec.max_iter} iterations")
        # report dispersion and correlation evaluated at the converged coefficients
        s = ysum - xsum @ coef
        q = yss - 2.0 * (xty @ coef) + np.einsum("ipq,p,q->i", xtx, coef, coef)
        phi = float(q.sum()) / max(ntot - p, 1.0)
        if corr is not WorkingCorr.INDEPENDENCE:
            rho_val, clamped = self._moment_rho(s / np.sqrt(phi), q / phi, n, 1.0,
                                                arm if corr is WorkingCorr.ARM_EXCHANGEABLE
                                                else None)
        return self._package(coef, phi, rho_val, clamped, it, change)

    def _fit_rows(self, keep):
        rows, y, starts, sizes, arm = self._row_subset(keep)
        link = self.link
        corr = self.spec.working_corr
        p = rows.shape[1]
        ntot = float(sizes.sum())
        coef = self._irls_start(rows, y)
        rho_val, clamped = 0.0, False
        it, change = 0, 0.0
        for it in range(1, self.spec.max_iter + 1):
            eta = rows @ coef
            mu = link.mean(eta)
            dmu = link.dmu(eta)
            var = link.var(mu)
            resid = y - mu
            pearson = resid / np.sqrt(var)
            s = np.add.reduceat(pearson, starts)
            q = np.add.reduceat(pearson * pearson, starts)
            phi = float(q.sum()) / max(ntot - p, 1.0)
            if corr is WorkingCorr.INDEPENDENCE:
                rho_c = np.zeros(len(sizes))
            else:
                rho_val, clamped = self._moment_rho(s, q, sizes, phi,
                                                    arm if corr is WorkingCorr.ARM_EXCHANGEABLE
                                                    else None)
                rho_c = (np.where(arm == 1, rho_val[1], rho_val[0])
                         if corr is WorkingCorr.ARM_EXCHANGEABLE
                         else np.full(len(sizes), rho_val))
            u = rows * dmu[:, None]
            vinv_u = _vinv_apply(u, var, rho_c, starts, sizes)
            vinv_r = _vinv_apply(resid[:, None], var, rho_c, starts, sizes)[:, 0]
            try:
                step = np.linalg.solve(u.T @ vinv_u, u.T @ vinv_r)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError("singular system in marginal-model fit") from exc
            coef = coef + step
            change = float(np.max(np.abs(step)) / max(1.0, np.max(np.abs(coef))))
            if change < self.spec.tol:
                break
        else:
            raise ConvergenceError(f"GEE did not converge in {self.spec.max_iter} iterations")
        mu = link.mean(rows @ coef)
        pearson = (y - mu) / np.sqrt(link.var(mu))
        phi = float(np.sum(pearson**2)) / max(ntot - p, 1.0)
        if corr is not WorkingCorr.INDEPENDENCE:
            s = np.add.reduceat(pearson, starts)
            q = np.add.reduceat(pearson * pearson, starts)
            rho_val, clamped = self._moment_rho(s, q, sizes, phi,
                                                arm if corr is WorkingCorr.ARM_EXCHANGEABLE
                                                else None)
        return self._package(coef, phi, rho_val, clamped, it, change)

    def _package(self, coef, phi, rho_val, clamped, it, change):
        vc: dict[str, float] = {"phi": phi}
        if self.spec.working_corr is WorkingCorr.EXCHANGEABLE:
            vc["rho"] = float(rho_val)
        elif self.spec.working_corr is WorkingCorr.ARM_EXCHANGEABLE:
            vc["rho0"], vc["rho1"] = float(rho_val[0]), float(rho_val[1])
        conv = Convergence(converged=True, iterations=it, criterion=change,
                           clamped_icc=clamped)
        return FittedWorkingModel(self.spec, coef=coef, coef_names=self.info.names,
                                  variance_components=vc, convergence=conv)

    def _irls_start(self, rows, y):
        if self.spec.link is Link.IDENTITY:
            return np.linalg.lstsq(rows, y, rcond=None)[0]
        coef = np.zeros(rows.shape[1])
        mbar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        coef[0] = np.log(mbar / (1 - mbar)) if self.spec.link is Link.LOGIT else np.log(mbar)
        link = self.link
        for _ in range(25):
            eta = np.clip(rows @ coef, -30.0, 30.0)
            mu = link.mean(eta)
            w = np.maximum(link.dmu(eta) ** 2 / link.var(mu), 1e-12)
            z = eta + (y - mu) / np.maximum(link.dmu(eta), 1e-12)
            wx = rows * w[:, None]
            try:
                coef = np.linalg.solve(wx.T @ rows, wx.T @ z)
            except np.linalg.LinAlgError:
                break
        return coef

    def _row_subset(self, keep):
        data = self.data
        if keep is None:
            return (self.rows, data.y, data.starts[:-1], data.sizes.astype(float),
                    data.treatment.astype(float))
        keep = np.asarray(keep)
        mask = np.zeros(data.m, dtype=bool)
        mask[keep] = True
        rowmask = mask[data.row_cluster]
        sizes = data.sizes[keep]
        starts = np.concatenate([[0], np.cumsum(sizes[:-1])])
        return (self.rows[rowmask], data.y[rowmask], starts, sizes.astype(float),
                data.treatment[keep].astype(float))

    # -- covariance and prediction ---------------------------------------

    def _mancl_derouen(self, fitted: FittedWorkingModel, keep) -> np.ndarray:
        """Bias-corrected sandwich: leverage adjustment (I - H_i)^-1 on residuals."""
        rows, y, starts, sizes, arm = self._row_subset(keep)
        link = self.link
        corr = self.spec.working_corr
        vc = fitted.variance_components
        eta = rows @ fitted.coef
        mu, dmu, var = link.mean(eta), link.dmu(eta), link.var(link.mean(eta))
        k = rows.shape[1]
        bread = np.zeros((k, k))
        pieces = []
        bounds = np.concatenate([starts, [len(y)]]).astype(int)
        for i in range(len(sizes)):
            lo, hi = bounds[i], bounds[i + 1]
            if corr is WorkingCorr.EXCHANGEABLE:
                rho = vc["rho"]
            elif corr is WorkingCorr.ARM_EXCHANGEABLE:
                rho = vc["rho1"] if arm[i] == 1 else vc["rho0"]
            else:
                rho = 0.0
            ni = hi - lo
            d = rows[lo:hi] * dmu[lo:hi, None]
            isv = 1.0 / np.sqrt(var[lo:hi])
            cinv = (np.eye(ni) - (rho / (1.0 - rho + rho * ni)) * np.ones((ni, ni))) \
                / (1.0 - rho)
            vinv = isv[:, None] * cinv * isv[None, :]
            dtv = d.T @ vinv
            bread += dtv @ d
            pieces.append((d, dtv, y[lo:hi] - mu[lo:hi]))
        bread_inv = np.linalg.inv(bread)
        meat = np.zeros((k, k))
        for d, dtv, resid in pieces:
            hmat = d @ bread_inv @ dtv
            adj = np.linalg.solve(np.eye(len(resid)) - hmat, resid)
            g = dtv @ adj
            meat += np.outer(g, g)
        return bread_inv @ meat @ bread_inv

    def predict(self, model: FittedWorkingModel, a: int) -> np.ndarray:
        c = self.info.a_col
        if self.spec.link is Link.IDENTITY:
            eta0 = self.zbar @ model.coef - self.zbar[:, c] * model.coef[c]
            return eta0 + a * model.coef[c]
        eta0 = self.rows @ model.coef - self.rows[:, c] * model.coef[c]
        eta = np.clip(eta0 + a * model.coef[c], -700.0, 700.0)
        per_row = expit(eta) if self.spec.link is Link.LOGIT else np.exp(eta)
        return np.add.reduceat(per_row, self.data.starts[:-1]) / self.data.sizes


def _vinv_apply(m_rows: np.ndarray, var: np.ndarray, rho_c: np.ndarray,
                starts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Apply the block-diagonal inverse working covariance to stacked rows.

    For each cluster, V^-1 = A^-1/2 C^-1 A^-1/2 with the exchangeable inverse
    C^-1 = (I - rho/(1 - rho + rho n) J) / (1 - rho), applied without forming
    any matrix.
    """
    isv = 1.0 / np.sqrt(var)
    scaled = m_rows * isv[:, None]
    colsum = np.add.reduceat(scaled, starts.astype(int), axis=0)
    shrink = rho_c / (1.0 - rho_c + rho_c * sizes)
    rowcl = np.repeat(np.arange(len(sizes)), sizes.astype(int))
    inner = (scaled - shrink[rowcl, None] * colsum[rowcl]) / (1.0 - rho_c)[rowcl, None]
    return inner * isv[:, None]
