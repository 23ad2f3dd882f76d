import numpy as np
import pytest

from crtstd.core import ClusterRecord, TrialData


def make_trial(rng, m=8, sizes=None, binary=False, p=2, q=1, treat=None,
               strata=None):
    """Small random trial with both arms present."""
    if sizes is None:
        sizes = rng.integers(2, 9, size=m)
    if treat is None:
        treat = np.array([1, 0] * (m // 2) + [1] * (m % 2))
    clusters = []
    for i in range(m):
        n = int(sizes[i])
        x = rng.normal(0, 1, (n, p))
        h = rng.normal(0, 1, q)
        mu = 0.5 * treat[i] + (x[:, 0] * 0.3 if p else 0.0) + (0.2 * h[0] if q else 0.0)
        if binary:
            y = rng.binomial(1, 1 / (1 + np.exp(-mu))).astype(float)
        else:
            y = mu + rng.normal(0, 1, n)
        clusters.append(ClusterRecord(
            cluster_id=f"c{i}", treatment=int(treat[i]), outcomes=y,
            covariates=x, cluster_covariates=h,
            stratum=None if strata is None else strata[i]))
    return TrialData(clusters)


def cluster_means_trial(specs):
    """Trial from (ybar, treatment, size) triples, constant outcomes per cluster."""
    clusters = []
    for i, (ybar, a, n) in enumerate(specs):
        clusters.append(ClusterRecord(
            cluster_id=f"c{i}", treatment=a,
            outcomes=np.full(n, float(ybar)),
            covariates=np.empty((n, 0)), cluster_covariates=np.empty(0)))
    return TrialData(clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
