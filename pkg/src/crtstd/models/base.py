"""Working-model specifications, fitted-model container, and the fit/predict API.

Every family exposes the same surface: ``fit`` produces a
:class:`FittedWorkingModel`, and ``predict_cluster_means`` returns the
estimated conditional cluster-mean outcome under either treatment arm. The
fitted model is a plain immutable record; all prediction logic lives in
stateless functions keyed by family, so models can be shared across threads
and pickled for parallel simulation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..core import TrialData, require_valid


class ConvergenceError(RuntimeError):
    """An iterative fit failed to converge within its iteration budget."""


class Family(enum.Enum):
    NULL = "null"
    CLUSTER_LM = "cluster_lm"
    CLUSTER_GLM_LOGIT = "cluster_glm_logit"
    LMM = "lmm"
    GLMM_LOGIT = "glmm_logit"
    GLMM_LOG = "glmm_log"
    GEE = "gee"


class Link(enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"
    LOG = "log"


class WorkingCorr(enum.Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    ARM_EXCHANGEABLE = "arm_exchangeable"


class Marginalization(enum.Enum):
    QUADRATURE = "quadrature"
    HEDEKER = "hedeker"


@dataclass(frozen=True)
class ModelSpec:
    """What to fit and how to turn the fit into cluster-mean predictions."""

    family: Family
    adjusted: bool = False
    include_size: bool = True      # adjusted models carry N as a covariate unless disabled
    contextual: bool = True        # split individual covariates into within/between parts
    reml: bool = False             # linear mixed model only; default is ML
    link: Link = Link.IDENTITY     # GEE only
    working_corr: WorkingCorr = WorkingCorr.EXCHANGEABLE  # GEE only
    marginalization: Marginalization = Marginalization.QUADRATURE  # logistic GLMM only
    prediction_nodes: int = 64     # Gauss-Hermite nodes for logistic-normal predictions
    likelihood_nodes: int = 25     # adaptive Gauss-Hermite nodes for the GLMM likelihood
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.prediction_nodes < 1 or self.likelihood_nodes < 1:
            raise ValueError("quadrature node counts must be positive")

    @property
    def individual_level(self) -> bool:
        return self.family in (Family.LMM, Family.GLMM_LOGIT, Family.GLMM_LOG, Family.GEE)


@dataclass(frozen=True)
class Convergence:
    converged: bool = True
    iterations: int = 0
    criterion: float = 0.0       # final relative change or gradient norm
    boundary: bool = False       # a variance component was clamped at zero
    clamped_icc: bool = False    # a moment ICC estimate fell outside its range


@dataclass(frozen=True)
class FittedWorkingModel:
    """Coefficients, variance components, and diagnostics of one fitted family."""

    spec: ModelSpec
    coef: np.ndarray
    coef_names: tuple[str, ...]
    variance_components: Mapping[str, float] = field(default_factory=dict)
    convergence: Convergence = Convergence()
    coef_cov: np.ndarray | None = None   # family-specific coefficient covariance

    @property
    def treatment_coef(self) -> float:
        return float(self.coef[1])

    @property
    def treatment_se(self) -> float | None:
        if self.coef_cov is None:
            return None
        return float(np.sqrt(self.coef_cov[1, 1]))


def icc(model: FittedWorkingModel) -> float | tuple[float, float]:
    """Intracluster correlation implied by the fitted model.

    Defined for the linear mixed model and for GEE with (arm-)exchangeable
    working correlation; everything else has no model ICC.
    """
    vc = model.variance_components
    fam = model.spec.family
    if fam is Family.LMM:
        denom = vc["sigma_b2"] + vc["sigma_e2"]
        return 0.0 if denom == 0 else vc["sigma_b2"] / denom
    if fam is Family.GEE and model.spec.working_corr is WorkingCorr.EXCHANGEABLE:
        return vc["rho"]
    if fam is Family.GEE and model.spec.working_corr is WorkingCorr.ARM_EXCHANGEABLE:
        return (vc["rho0"], vc["rho1"])
    raise ValueError(f"ICC is not defined for family {fam.value}")


def make_workspace(spec: ModelSpec, data: TrialData):
    """Family-specific fitting workspace; builds designs and statistics once.

    The workspace supports subset fits (``fit(keep=...)``) so the jackknife
    can refit without rebuilding anything, and predictions for all clusters
    under a counterfactual arm.
    """
    from . import gee as _gee
    from . import linear as _linear
    from . import mixed as _mixed

    if spec.family is Family.NULL:
        return _NullWorkspace(spec, data)
    if spec.family in (Family.CLUSTER_LM, Family.CLUSTER_GLM_LOGIT):
        return _linear.ClusterWorkspace(spec, data)
    if spec.family is Family.LMM:
        return _mixed.LmmWorkspace(spec, data)
    if spec.family in (Family.GLMM_LOGIT, Family.GLMM_LOG):
        return _mixed.GlmmWorkspace(spec, data)
    return _gee.GeeWorkspace(spec, data)


class _NullWorkspace:
    """The no-model family: predicts 0, reducing standardization to pure IPW."""

    def __init__(self, spec: ModelSpec, data: TrialData):
        self.spec = spec
        self.data = data

    def fit(self, keep: np.ndarray | None = None, compute_cov: bool = False) -> FittedWorkingModel:
        return FittedWorkingModel(self.spec, coef=np.empty(0), coef_names=())

    def predict(self, model: FittedWorkingModel, a: int) -> np.ndarray:
        return np.zeros(self.data.m)


def fit(spec: ModelSpec, data: TrialData, compute_cov: bool = False) -> FittedWorkingModel:
    """Fit one working model to the full trial."""
    require_valid(data)
    return make_workspace(spec, data).fit(compute_cov=compute_cov)


def predict_cluster_means(model: FittedWorkingModel, data: TrialData, a: int) -> np.ndarray:
    """Estimated conditional cluster-mean outcome under arm ``a`` for every cluster."""
    return make_workspace(model.spec, data).predict(model, int(a))


def predict_cluster_mean(model: FittedWorkingModel, cluster, a: int) -> float:
    """Single-cluster convenience wrapper around :func:`predict_cluster_means`."""
    return float(predict_cluster_means(model, TrialData([cluster]), a)[0])
