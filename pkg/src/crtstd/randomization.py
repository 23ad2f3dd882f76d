"""Per-cluster treatment assignment probabilities for the supported designs.

Supported designs: simple (one probability), stratified (per-stratum
probabilities), pair-matched (fixed 1/2), and covariate-constrained
randomization, where the probabilities are the column means of a binary
scheme matrix with one admissible assignment vector per row. Scheme
enumeration itself is out of scope; the matrix is an input.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import TrialData


class PositivityError(ValueError):
    """An assignment probability of 0 or 1 would make Eq.-style weighting divide by zero."""


class DesignVariant(enum.Enum):
    SIMPLE = "simple"
    STRATIFIED = "stratified"
    PAIR_MATCHED = "pair_matched"
    CONSTRAINED = "constrained"


@dataclass(frozen=True)
class RandomizationDesign:
    variant: DesignVariant
    pi: float = 0.5
    stratum_probs: Mapping[str, float] | None = None
    scheme_matrix: np.ndarray | None = None   # (R, m) binary, rows distinct

    def __post_init__(self):
        v = self.variant
        if v is DesignVariant.SIMPLE:
            if not 0.0 < self.pi < 1.0:
                raise ValueError(f"simple design probability must be in (0,1), got {self.pi}")
        elif v is DesignVariant.STRATIFIED:
            if not self.stratum_probs:
                raise ValueError("stratified design requires stratum probabilities")
            for s, p in self.stratum_probs.items():
                if not 0.0 < p < 1.0:
                    raise ValueError(f"stratum {s!r} probability must be in (0,1), got {p}")
        elif v is DesignVariant.CONSTRAINED:
            t = np.asarray(self.scheme_matrix)
            if t is None or t.ndim != 2 or t.shape[0] < 1:
                raise ValueError("constrained design requires a 2-D scheme matrix")
            if not np.all(np.isin(t, (0, 1))):
                raise ValueError("scheme matrix entries must be 0 or 1")
            t = t.astype(np.int64)
            if len(np.unique(t, axis=0)) != t.shape[0]:
                raise ValueError("scheme matrix rows must be distinct assignment vectors")
            t.flags.writeable = False
            object.__setattr__(self, "scheme_matrix", t)


def simple(pi: float = 0.5) -> RandomizationDesign:
    return RandomizationDesign(DesignVariant.SIMPLE, pi=pi)


def stratified(stratum_probs: Mapping[str, float]) -> RandomizationDesign:
    return RandomizationDesign(DesignVariant.STRATIFIED, stratum_probs=dict(stratum_probs))


def pair_matched() -> RandomizationDesign:
    return RandomizationDesign(DesignVariant.PAIR_MATCHED)


def constrained(scheme_matrix: np.ndarray) -> RandomizationDesign:
    return RandomizationDesign(DesignVariant.CONSTRAINED, scheme_matrix=np.asarray(scheme_matrix))


def assignment_probabilities(design: RandomizationDesign, data: TrialData) -> np.ndarray:
    """Probability of treatment for every cluster, in cluster order.

    Constrained designs use the exact rational column mean of the scheme
    matrix (integer column sums divided once by the scheme count). Any
    probability of exactly 0 or 1 is a hard error because the standardization
    residual term divides by pi^a (1-pi)^(1-a).
    """
    m = data.m
    v = design.variant
    if v is DesignVariant.SIMPLE:
        probs = np.full(m, design.pi)
    elif v is DesignVariant.PAIR_MATCHED:
        probs = np.full(m, 0.5)
    elif v is DesignVariant.STRATIFIED:
        probs = np.empty(m)
        for i, s in enumerate(data.strata):
            if s is None or s not in design.stratum_probs:
                raise ValueError(
                    f"cluster {data.cluster_ids[i]}: stratum {s!r} has no assignment probability")
            probs[i] = design.stratum_probs[s]
    else:
        t = design.scheme_matrix
        if t.shape[1] != m:
            raise ValueError(
                f"scheme matrix has {t.shape[1]} columns but the trial has {m} clusters")
        probs = t.sum(axis=0, dtype=np.int64) / t.shape[0]
    bad = np.flatnonzero((probs <= 0.0) | (probs >= 1.0))
    if bad.size:
        i = int(bad[0])
        raise PositivityError(
            f"positivity violation: cluster {data.cluster_ids[i]} is deterministic "
            f"under the design (probability {probs[i]})")
    return probs


def balanced_constrained_check(design: RandomizationDesign) -> bool:
    """True iff every column mean of the scheme matrix is exactly 1/2."""
    if design.variant is not DesignVariant.CONSTRAINED:
        raise ValueError("balance check applies to constrained designs only")
    t = design.scheme_matrix
    return bool(np.all(2 * t.sum(axis=0, dtype=np.int64) == t.shape[0]))


def load_scheme_matrix(path: str, header: bool = False) -> np.ndarray:
    """Read a scheme matrix from CSV: one scheme per row, 0/1 entries."""
    rows: list[list[int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [int(c) for c in row]
            except ValueError as exc:
                raise ValueError(f"scheme matrix line {lineno}: non-integer entry") from exc
            if any(v not in (0, 1) for v in vals):
                raise ValueError(f"scheme matrix line {lineno}: entries must be 0 or 1")
            rows.append(vals)
    if not rows:
        raise ValueError("scheme matrix file is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError("scheme matrix rows have inconsistent lengths")
    return np.array(rows, dtype=np.int64)
