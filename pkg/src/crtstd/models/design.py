"""Design-matrix construction shared by all working-model families.

Adjusted cluster-level models regress on [1, A, x-means, H, N]; adjusted
individual-level models regress on [1, A, X - x-mean, x-mean, H, N] (the
within/between split), or on raw X when the split is disabled. Unadjusted
models use [1, A] only. Counterfactual predictions never rebuild matrices:
the treatment column is linear, so eta(a) = eta_without_A + a * coef_A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import TrialData


class RankError(ValueError):
    """The requested design matrix is rank deficient; columns are never dropped silently."""


@dataclass(frozen=True)
class DesignInfo:
    """Column layout of a model design matrix."""

    names: tuple[str, ...]
    a_col: int                   # index of the treatment column
    within: tuple[int, int]      # [start, stop) of within-cluster deviation columns
    cluster_level: bool          # one row per cluster vs one row per individual


def _covariate_names(data: TrialData, prefix: str, k: int) -> list[str]:
    return [f"{prefix}{j + 1}" for j in range(k)]


def design_info(data: TrialData, *, cluster_level: bool, adjusted: bool,
                contextual: bool, include_size: bool) -> DesignInfo:
    p = data.x.shape[1]
    q = data.h_matrix.shape[1]
    names = ["intercept", "treatment"]
    within = (2, 2)
    if adjusted:
        if cluster_level or not contextual:
            names += _covariate_names(data, "xmean_" if cluster_level else "x", p)
        else:
            within = (2, 2 + p)
            names += _covariate_names(data, "xw", p) + _covariate_names(data, "xb", p)
        names += _covariate_names(data, "h", q)
        if include_size:
            names.append("size")
    return DesignInfo(tuple(names), a_col=1, within=within, cluster_level=cluster_level)


def cluster_design(data: TrialData, info: DesignInfo) -> np.ndarray:
    """(m, k) design with one row per cluster: [1, A, x-means, H, (N)]."""
    m = data.m
    cols = [np.ones(m), data.treatment.astype(float)]
    k = len(info.names)
    if k > 2:
        cols.append(data.xbar)
        cols.append(data.h_matrix)
        if info.names[-1] == "size":
            cols.append(data.sizes.astype(float))
    return _assemble(cols, m, k)


def row_design(data: TrialData, info: DesignInfo) -> np.ndarray:
    """(n, k) design with one row per individual."""
    n = len(data.y)
    a_rows = data.treatment.astype(float)[data.row_cluster]
    cols: list[np.ndarray] = [np.ones(n), a_rows]
    k = len(info.names)
    if k > 2:
        xb_rows = data.xbar[data.row_cluster]
        if info.within[1] > info.within[0]:
            cols.append(data.x - xb_rows)
            cols.append(xb_rows)
        else:
            cols.append(data.x)
        cols.append(data.h_matrix[data.row_cluster])
        if info.names[-1] == "size":
            cols.append(data.sizes.astype(float)[data.row_cluster])
    return _assemble(cols, n, k)


def cluster_mean_design(data: TrialData, info: DesignInfo) -> np.ndarray:
    """Within-cluster row means of the individual-level design.

    Within-deviation columns are exactly zero by construction, which keeps
    identity-link predictions exactly invariant to row permutations.
    """
    m = data.m
    cols = [np.ones(m), data.treatment.astype(float)]
    k = len(info.names)
    if k > 2:
        if info.within[1] > info.within[0]:
            cols.append(np.zeros((m, info.within[1] - info.within[0])))
        cols.append(data.xbar)
        cols.append(data.h_matrix)
        if info.names[-1] == "size":
            cols.append(data.sizes.astype(float))
    return _assemble(cols, m, k)


def _assemble(cols: list[np.ndarray], rows: int, k: int) -> np.ndarray:
    out = np.empty((rows, k))
    j = 0
    for c in cols:
        c = np.asarray(c, dtype=float)
        w = 1 if c.ndim == 1 else c.shape[1]
        out[:, j:j + w] = c.reshape(rows, w)
        j += w
    return out


def check_full_rank(mat: np.ndarray, what: str) -> None:
    if mat.shape[0] < mat.shape[1] or np.linalg.matrix_rank(mat) < mat.shape[1]:
        raise RankError(f"rank-deficient design for {what} "
                        f"({mat.shape[0]} rows, {mat.shape[1]} columns)")


@dataclass(frozen=True)
class ClusterStats:
    """Per-cluster sufficient statistics of (design, outcome) rows.

    Every identity-link fit reduces to sums of these over the active clusters,
    which makes leave-one-cluster-out refits cheap.
    """

    xtx: np.ndarray    # (m, k, k)
    xsum: np.ndarray   # (m, k)  column sums
    xty: np.ndarray    # (m, k)
    ysum: np.ndarray   # (m,)
    yss: np.ndarray    # (m,)   sum of squared outcomes
    n: np.ndarray      # (m,)


def cluster_stats(design: np.ndarray, y: np.ndarray, starts: np.ndarray,
                  sizes: np.ndarray) -> ClusterStats:
    lead = starts[:-1]
    outer = design[:, :, None] * design[:, None, :]
    return ClusterStats(
        xtx=np.add.reduceat(outer, lead, axis=0),
        xsum=np.add.reduceat(design, lead, axis=0),
        xty=np.add.reduceat(design * y[:, None], lead, axis=0),
        ysum=np.add.reduceat(y, lead),
        yss=np.add.reduceat(y * y, lead),
        n=sizes.astype(float),
    )
