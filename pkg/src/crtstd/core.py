"""Trial data model, estimand specifications, weights, and contrast functions.

The data model is deliberately minimal: a trial is an ordered collection of
clusters, each holding a cluster-level treatment indicator, individual
outcomes, an individual-level covariate matrix, and a cluster-level covariate
vector. Covariates are purely numeric; categorical variables must be encoded
upstream. All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an operation requires valid trial data and gets violations."""


class EstimationError(RuntimeError):
    """Raised when an estimation step cannot produce a finite result."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ClusterRecord:
    """One cluster: treatment arm, outcomes, and covariates.

    ``size`` is the declared cluster size; it must equal the number of outcome
    rows (``validate`` reports a mismatch rather than raising here, so that
    malformed inputs can be diagnosed).
    """

    cluster_id: str
    treatment: int
    outcomes: np.ndarray          # (N_i,)
    covariates: np.ndarray        # (N_i, p) individual-level
    cluster_covariates: np.ndarray  # (q,)
    stratum: str | None = None
    size: int = -1                # defaults to len(outcomes)

    def __post_init__(self):
        y = _readonly(np.atleast_1d(np.asarray(self.outcomes, dtype=float)))
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if x.size else x.reshape(len(y), 0)
        h = np.atleast_1d(np.asarray(self.cluster_covariates, dtype=float))
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "cluster_covariates", _readonly(h))
        if self.size < 0:
            object.__setattr__(self, "size", len(y))

    @property
    def n(self) -> int:
        return len(self.outcomes)


class TrialData:
    """Ordered, immutable collection of clusters with cached stacked arrays.

    Cluster order is preserved from input and defines the canonical jackknife
    deletion order, so repeated runs are bit-reproducible.
    """

    def __init__(self, clusters: Sequence[ClusterRecord]):
        self.clusters: tuple[ClusterRecord, ...] = tuple(clusters)
        if not self.clusters:
            raise ValueError("trial must contain at least one cluster")

    @property
    def m(self) -> int:
        return len(self.clusters)

    @cached_property
    def sizes(self) -> np.ndarray:
        return _readonly(np.array([c.n for c in self.clusters], dtype=np.int64))

    @cached_property
    def treatment(self) -> np.ndarray:
        return _readonly(np.array([c.treatment for c in self.clusters], dtype=np.int64))

    @cached_property
    def strata(self) -> tuple[str | None, ...]:
        return tuple(c.stratum for c in self.clusters)

    @cached_property
    def cluster_ids(self) -> tuple[str, ...]:
        return tuple(c.cluster_id for c in self.clusters)

    @cached_property
    def h_matrix(self) -> np.ndarray:
        """(m, q) cluster-level covariates."""
        q = len(self.clusters[0].cluster_covariates)
        return _readonly(np.array([c.cluster_covariates for c in self.clusters],
                                  dtype=float).reshape(self.m, q))

    @cached_property
    def y(self) -> np.ndarray:
        """Stacked individual outcomes, cluster-major."""
        return _readonly(np.concatenate([c.outcomes for c in self.clusters]))

    @cached_property
    def x(self) -> np.ndarray:
        """Stacked (n, p) individual covariates, cluster-major."""
        p = self.clusters[0].covariates.shape[1]
        return _readonly(np.vstack([c.covariates.reshape(c.n, p) for c in self.clusters])
                         if p else np.empty((int(self.sizes.sum()), 0)))

    @cached_property
    def starts(self) -> np.ndarray:
        """(m+1,) row offsets of each cluster in the stacked arrays."""
        return _readonly(np.concatenate([[0], np.cumsum(self.sizes)]))

    @cached_property
    def row_cluster(self) -> np.ndarray:
        return _readonly(np.repeat(np.arange(self.m), self.sizes))

    @cached_property
    def ybar(self) -> np.ndarray:
        return _readonly(np.array([c.outcomes.mean() for c in self.clusters]))

    @cached_property
    def xbar(self) -> np.ndarray:
        """(m, p) within-cluster covariate means."""
        p = self.x.shape[1]
        if p == 0:
            return _readonly(np.empty((self.m, 0)))
        sums = np.add.reduceat(self.x, self.starts[:-1], axis=0)
        return _readonly(sums / self.sizes[:, None])

    def subset(self, indices: Sequence[int]) -> "TrialData":
        """New TrialData keeping the requested clusters, order preserved."""
        return TrialData([self.clusters[i] for i in indices])


def validate(data: TrialData) -> list[str]:
    """Check all trial-data invariants; return a list of violations.

    Returns an empty list on success. Never mutates or raises; callers decide
    what to do with the report.
    """
    out: list[str] = []
    seen: set[str] = set()
    p0 = data.clusters[0].covariates.shape[1]
    q0 = len(data.clusters[0].cluster_covariates)
    for c in data.clusters:
        tag = f"cluster {c.cluster_id}"
        if c.cluster_id in seen:
            out.append(f"{tag}: duplicate cluster id")
        seen.add(c.cluster_id)
        if c.size < 1:
            out.append(f"{tag}: size must be at least 1 (got {c.size})")
        if c.size != c.n:
            out.append(f"{tag}: row count mismatch (size {c.size}, {c.n} outcome rows)")
        if c.treatment not in (0, 1):
            out.append(f"{tag}: treatment must be 0 or 1 (got {c.treatment})")
        if c.covariates.shape[0] != c.n:
            out.append(f"{tag}: covariate rows ({c.covariates.shape[0]}) "
                       f"do not match outcome rows ({c.n})")
        if c.covariates.shape[1] != p0:
            out.append(f"{tag}: individual covariate dimension {c.covariates.shape[1]} "
                       f"differs from first cluster ({p0})")
        if len(c.cluster_covariates) != q0:
            out.append(f"{tag}: cluster covariate dimension {len(c.cluster_covariates)} "
                       f"differs from first cluster ({q0})")
        if not np.all(np.isfinite(c.outcomes)):
            out.append(f"{tag}: non-finite or missing outcome values")
        if c.covariates.size and not np.all(np.isfinite(c.covariates)):
            out.append(f"{tag}: non-finite or missing covariate values")
        if c.cluster_covariates.size and not np.all(np.isfinite(c.cluster_covariates)):
            out.append(f"{tag}: non-finite or missing cluster covariate values")
    arms = {c.treatment for c in data.clusters if c.treatment in (0, 1)}
    if 0 not in arms:
        out.append("no control clusters")
    if 1 not in arms:
        out.append("no treated clusters")
    return out


def require_valid(data: TrialData) -> None:
    violations = validate(data)
    if violations:
        raise ValidationError("; ".join(violations))


@dataclass(frozen=True)
class ClusterSummary:
    """Cluster-level aggregates: outcome mean, covariate means, size, arm."""

    ybar: float
    xbar: np.ndarray
    n: int
    a: int
    h: np.ndarray


def summarize(data: TrialData) -> list[ClusterSummary]:
    """One summary per cluster, in input order, with exact arithmetic means."""
    out = []
    for c in data.clusters:
        if c.n == 0:
            raise ValidationError(f"cluster {c.cluster_id}: cannot summarize an empty cluster")
        out.append(ClusterSummary(ybar=float(c.outcomes.mean()),
                                  xbar=c.covariates.mean(axis=0) if c.covariates.size
                                  else np.zeros(c.covariates.shape[1]),
                                  n=c.n, a=c.treatment, h=c.cluster_covariates))
    return out


class WeightScheme(enum.Enum):
    CLUSTER = "cluster"        # every cluster weighted equally
    INDIVIDUAL = "individual"  # clusters weighted by size
    CUSTOM = "custom"          # user function of (N_i, H_i)
    SUBGROUP = "subgroup"      # indicator on one binary cluster covariate


class Contrast(enum.Enum):
    DIFFERENCE = "difference"
    RATIO = "ratio"
    LOG_RATIO = "log_ratio"
    LOG_ODDS_RATIO = "log_odds_ratio"


@dataclass(frozen=True)
class EstimandSpec:
    """Weight scheme and contrast function defining the target estimand."""

    weight_scheme: WeightScheme = WeightScheme.CLUSTER
    contrast: Contrast = Contrast.DIFFERENCE
    custom_weight: Callable[[int, np.ndarray], float] | None = None
    subgroup_component: int = 0

    def __post_init__(self):
        if self.weight_scheme is WeightScheme.CUSTOM and self.custom_weight is None:
            raise ValueError("CUSTOM weight scheme requires a custom_weight function")


CLUSTER_ATE = EstimandSpec(WeightScheme.CLUSTER, Contrast.DIFFERENCE)
INDIVIDUAL_ATE = EstimandSpec(WeightScheme.INDIVIDUAL, Contrast.DIFFERENCE)


def weights(data: TrialData, spec: EstimandSpec) -> tuple[np.ndarray, float]:
    """Per-cluster weights and their total for the requested scheme.

    Weights are raw nonnegative reals; all downstream estimators divide by the
    total, so rescaling by any positive constant is a no-op.
    """
    ws = spec.weight_scheme
    if ws is WeightScheme.CLUSTER:
        omega = np.ones(data.m)
    elif ws is WeightScheme.INDIVIDUAL:
        omega = data.sizes.astype(float)
    elif ws is WeightScheme.SUBGROUP:
        k = spec.subgroup_component
        col = data.h_matrix[:, k]
        if not np.all(np.isin(col, (0.0, 1.0))):
            raise ValueError(f"SUBGROUP weights need a binary cluster covariate at index {k}")
        omega = col.astype(float)
    else:
        omega = np.array([float(spec.custom_weight(c.n, c.cluster_covariates))
                          for c in data.clusters])
        if np.any(omega < 0):
            bad = data.cluster_ids[int(np.argmin(omega))]
            raise ValueError(f"negative custom weight for cluster {bad}")
    total = float(omega.sum())
    if total <= 0:
        raise ValueError("empty weighted population (all weights zero)")
    return omega, total


@dataclass(frozen=True)
class ContrastValue:
    """A treatment contrast together with the scale it lives on."""

    estimate: float
    contrast: Contrast


def apply_contrast(contrast: Contrast, x: float, y: float) -> float:
    """Evaluate the contrast function f(x, y); raises outside its domain."""
    if contrast is Contrast.DIFFERENCE:
        return x - y
    if contrast is Contrast.RATIO:
        if y == 0:
            raise EstimationError("RATIO contrast undefined: denominator mean is 0")
        return x / y
    if contrast is Contrast.LOG_RATIO:
        if x <= 0 or y <= 0:
            raise EstimationError(f"LOG_RATIO contrast needs positive means, got ({x}, {y})")
        return float(np.log(x) - np.log(y))
    if x <= 0 or x >= 1 or y <= 0 or y >= 1:
        raise EstimationError(f"LOG_ODDS_RATIO contrast needs means in (0,1), got ({x}, {y})")
    return float(np.log(x / (1 - x)) - np.log(y / (1 - y)))


def contrast_gradient(contrast: Contrast, x: float, y: float) -> np.ndarray:
    """Analytic gradient of f at (x, y), for delta-method standard errors."""
    if contrast is Contrast.DIFFERENCE:
        return np.array([1.0, -1.0])
    if contrast is Contrast.RATIO:
        if y == 0:
            raise EstimationError("RATIO gradient undefined at denominator 0")
        return np.array([1.0 / y, -x / y**2])
    if contrast is Contrast.LOG_RATIO:
        if x <= 0 or y <= 0:
            raise EstimationError("LOG_RATIO gradient undefined outside (0,inf)")
        return np.array([1.0 / x, -1.0 / y])
    if not (0 < x < 1 and 0 < y < 1):
        raise EstimationError("LOG_ODDS_RATIO gradient undefined outside (0,1)")
    return np.array([1.0 / (x * (1 - x)), -1.0 / (y * (1 - y))])
