"""Data-generating processes for the simulation experiments.

Six scenarios: continuous or binary outcomes, with cluster size either
non-informative, informative through covariates and a size-by-treatment
interaction, or informative through a tunable interaction strength used by
the informative-cluster-size test study. Cluster sizes are discrete uniform
with the expected total sample size fixed, so the mean size is the analytic
constant that also enters the covariate formulas.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ..core import (ClusterRecord, Contrast, TrialData, apply_contrast,
                    contrast_gradient)


class Scenario(enum.Enum):
    CONT_NONINF = "cont_noninf"
    CONT_INF = "cont_inf"
    BIN_NONINF = "bin_noninf"
    BIN_INF = "bin_inf"
    CONT_ICS_TEST = "cont_ics_test"
    BIN_ICS_TEST = "bin_ics_test"

    @property
    def binary(self) -> bool:
        return self in (Scenario.BIN_NONINF, Scenario.BIN_INF, Scenario.BIN_ICS_TEST)

    @property
    def contrast(self) -> Contrast:
        return Contrast.LOG_ODDS_RATIO if self.binary else Contrast.DIFFERENCE


_SIZE_SUPPORT = {30: (20, 180), 100: (6, 54)}


@dataclass(frozen=True)
class DgpSpec:
    scenario: Scenario
    m: int
    expected_total: int = 3000
    size_low: int | None = None
    size_high: int | None = None
    re_variance: float = 0.2
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least 2 clusters")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        lo, hi = self.size_support
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid cluster-size support [{lo}, {hi}]")

    @property
    def mean_size(self) -> float:
        return self.expected_total / self.m

    @property
    def size_support(self) -> tuple[int, int]:
        if self.size_low is not None and self.size_high is not None:
            return self.size_low, self.size_high
        if self.m in _SIZE_SUPPORT and self.expected_total == 3000:
            return _SIZE_SUPPORT[self.m]
        half = 0.8 * self.mean_size
        return max(1, round(self.mean_size - half)), round(self.mean_size + half)


def _covariates(dgp: DgpSpec, rng: np.random.Generator, n_sizes: np.ndarray,
                rowcl: np.ndarray):
    """Cluster covariates (H1, H2) and individual covariates (X1, X2)."""
    sc = dgp.scenario
    m = len(n_sizes)
    nrows = len(rowcl)
    en = dgp.mean_size
    nf = n_sizes.astype(float)
    if sc in (Scenario.CONT_NONINF, Scenario.CONT_ICS_TEST):
        h1 = rng.binomial(1, norm.cdf(np.sin(en)), size=m).astype(float)
        h2 = rng.normal(2.0 + h1 * en / 10.0, 3.0)
        x1 = rng.normal((h1 * h2)[rowcl] + en / 100.0, 4.0)
        x2 = rng.binomial(1, expit(np.log(en) * x1 * h1[rowcl] + h2[rowcl])).astype(float)
    elif sc is Scenario.CONT_INF:
        h1 = rng.binomial(1, norm.cdf(np.sin(nf)), size=m).astype(float)
        h2 = rng.normal(2.0 + h1 * nf / 10.0, 3.0)
        x1 = rng.normal((h1 * h2)[rowcl] + nf[rowcl] / 100.0, 4.0)
        x2 = rng.binomial(1, expit(np.log(nf[rowcl]) * x1 * h1[rowcl] + h2[rowcl])).astype(float)
    elif sc in (Scenario.BIN_NONINF, Scenario.BIN_ICS_TEST):
        h1 = rng.binomial(1, 0.5, size=m).astype(float)
        h2 = rng.normal(3.0 + h1, 1.0)
        x1 = rng.normal(h1[rowcl] + h2[rowcl] / 20.0 + 1.0, 4.0)
        x2 = rng.binomial(1, expit(4.0 * h1[rowcl] * x1 + h2[rowcl])).astype(float)
    else:  # BIN_INF
        h1 = rng.binomial(1, 0.5, size=m).astype(float)
        h2 = rng.normal(2.0 + h1 + nf / en, 1.0)
        x1 = rng.normal(h1[rowcl] + h2[rowcl] / 20.0 + nf[rowcl] / 100.0, 4.0)
        x2 = rng.binomial(1, expit(np.log(nf[rowcl]) * h1[rowcl] * x1 + h2[rowcl])).astype(float)
    return h1, h2, x1, x2


def _mean_surface(dgp: DgpSpec, n_sizes: np.ndarray, rowcl: np.ndarray,
                  h1, h2, x1, x2, gamma) -> tuple[np.ndarray, np.ndarray]:
    """Per-individual potential-outcome means (continuous) or linked means (binary).

    Returns (base, effect) with mean(a) = base + effect * a; the binary
    scenarios pass this pair through expit.
    """
    sc = dgp.scenario
    en = dgp.mean_size
    nf = n_sizes.astype(float)[rowcl]
    h1r, h2r, gr = h1[rowcl], h2[rowcl], gamma[rowcl]
    if sc is Scenario.CONT_NONINF:
        base = 3.0 + h1r * x1**2 / (5.0 * en) + np.cos(h2r) * x2 + np.abs(h2r) * np.sin(x2)
        effect = -3.0 + gr
    elif sc is Scenario.CONT_INF:
        size_term = nf**2 * np.log(nf) / en**2
        base = h1r * x1**2 / (5.0 * nf) - size_term + np.cos(h2r) * x2 \
            + np.abs(h2r) * np.sin(x2)
        effect = size_term + gr
    elif sc is Scenario.CONT_ICS_TEST:
        base = h1r * x1**2 / (5.0 * en) + np.cos(h2r) * x2 + np.abs(h2r) * np.sin(x2)
        effect = dgp.delta * nf**2 * np.log(nf) / en**2 + 1.0 + gr
    elif sc is Scenario.BIN_NONINF:
        base = -0.8 + x1**2 / 100.0 + h1r + np.cos(h2r) * x2 + np.abs(h2r) / 5.0
        effect = 0.8 + gr
    elif sc is Scenario.BIN_INF:
        size_term = nf**2 * np.log(nf) / (5.0 * en**2)
        base = -size_term + x1**2 / (2.0 * nf) + h1r + np.cos(h2r) * x2 + np.abs(h2r) / 5.0
        effect = size_term + gr
    else:  # BIN_ICS_TEST
        base = x1**2 / (2.0 * en) + h1r / 2.0 + np.cos(h2r) * x2 + np.abs(h2r) / 10.0
        effect = dgp.delta * nf**2 * np.log(nf / en) / (5.0 * en**2) + 1.0 + gr
    return base, effect


def _draw_cluster_batch(dgp: DgpSpec, rng: np.random.Generator, m: int):
    lo, hi = dgp.size_support
    n_sizes = rng.integers(lo, hi + 1, size=m)
    rowcl = np.repeat(np.arange(m), n_sizes)
    h1, h2, x1, x2 = _covariates(dgp, rng, n_sizes, rowcl)
    gamma = rng.normal(0.0, np.sqrt(dgp.re_variance), size=m)
    base, effect = _mean_surface(dgp, n_sizes, rowcl, h1, h2, x1, x2, gamma)
    return n_sizes, rowcl, h1, h2, x1, x2, base, effect


def generate_trial(dgp: DgpSpec, replicate_seed: int) -> TrialData:
    """One simulated trial, deterministic given the seed."""
    rng = np.random.default_rng(replicate_seed)
    n_sizes, rowcl, h1, h2, x1, x2, base, effect = _draw_cluster_batch(dgp, rng, dgp.m)
    if dgp.scenario.binary:
        y0 = rng.binomial(1, expit(base)).astype(float)
        y1 = rng.binomial(1, expit(base + effect)).astype(float)
    else:
        y0 = rng.normal(base, 1.0)
        y1 = rng.normal(base + effect, 1.0)
    treat = rng.binomial(1, 0.5, size=dgp.m)
    y = np.where(treat[rowcl] == 1, y1, y0)
    starts = np.concatenate([[0], np.cumsum(n_sizes)])
    clusters = []
    for i in range(dgp.m):
        lo, hi = starts[i], starts[i + 1]
        clusters.append(ClusterRecord(
            cluster_id=f"c{i + 1:04d}", treatment=int(treat[i]), outcomes=y[lo:hi],
            covariates=np.column_stack([x1[lo:hi], x2[lo:hi]]),
            cluster_covariates=np.array([h1[i], h2[i]])))
    return TrialData(clusters)


@dataclass(frozen=True)
class TrueEstimands:
    delta_c: float
    delta_i: float
    mc_se_c: float
    mc_se_i: float
    scale: Contrast
    mu_c: tuple[float, float]
    mu_i: tuple[float, float]
    clusters_used: int


def true_estimands(dgp: DgpSpec, super_population_size: int = 10**6,
                   batch: int = 20000, seed: int | None = None) -> TrueEstimands:
    """Super-population Monte Carlo evaluation of both marginal estimands.

    Potential outcomes are assigned to every simulated cluster under both
    arms; the mean-outcome surface is averaged directly (outcome noise is
    mean-zero given the surface), holding Monte Carlo error well below the
    published rounding. Standard errors come from batched moments of the
    per-cluster statistics through the delta method.
    """
    if super_population_size < 10**4:
        raise ValueError("super-population size below 1e4 is too noisy to be useful")
    rng = np.random.default_rng([dgp.seed if seed is None else seed, 0x545255])
    dim = 5   # (u1, u0, n*u1, n*u0, n) per cluster
    total = np.zeros(dim)
    crossp = np.zeros((dim, dim))
    used = 0
    while used < super_population_size:
        mb = min(batch, super_population_size - used)
        n_sizes, rowcl, _, _, _, _, base, effect = _draw_cluster_batch(dgp, rng, mb)
        if dgp.scenario.binary:
            mu1_rows, mu0_rows = expit(base + effect), expit(base)
        else:
            mu1_rows, mu0_rows = base + effect, base
        lead = np.concatenate([[0], np.cumsum(n_sizes[:-1])])
        nf = n_sizes.astype(float)
        u1 = np.add.reduceat(mu1_rows, lead) / nf
        u0 = np.add.reduceat(mu0_rows, lead) / nf
        v = np.column_stack([u1, u0, nf * u1, nf * u0, nf])
        total += v.sum(axis=0)
        crossp += v.T @ v
        used += mb
    mean = total / used
    cov_mean = (crossp / used - np.outer(mean, mean)) / used
    en = mean[4]
    mu_c = (mean[0], mean[1])
    mu_i = (mean[2] / en, mean[3] / en)
    scale = dgp.scenario.contrast

    def with_se(mu1, mu0, jac):
        grad2 = contrast_gradient(scale, mu1, mu0)
        grad = jac @ grad2
        return apply_contrast(scale, mu1, mu0), float(np.sqrt(grad @ cov_mean @ grad))

    jac_c = np.zeros((dim, 2))
    jac_c[0, 0] = jac_c[1, 1] = 1.0
    jac_i = np.zeros((dim, 2))
    jac_i[2, 0] = jac_i[3, 1] = 1.0 / en
    jac_i[4, 0] = -mu_i[0] / en
    jac_i[4, 1] = -mu_i[1] / en
    delta_c, se_c = with_se(*mu_c, jac_c)
    delta_i, se_i = with_se(*mu_i, jac_i)
    return TrueEstimands(delta_c=delta_c, delta_i=delta_i, mc_se_c=se_c, mc_se_i=se_i,
                         scale=scale, mu_c=mu_c, mu_i=mu_i, clusters_used=used)
