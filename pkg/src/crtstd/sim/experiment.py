"""Replicated simulation experiments and their performance metrics.

Each replicate simulates one trial, fits every working model in the grid,
and records the model-based treatment coefficient (with its family-specific
standard error) and the model-robust standardized estimates of both marginal
effects (with leave-one-cluster-out jackknife standard errors, one model
refit per deletion shared across estimands). Replicates are independent
tasks with derived seeds; results are reduced in replicate order, so output
is identical for any worker count.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from ..core import Contrast, EstimandSpec, WeightScheme, apply_contrast, weights
from ..ics import ics_test
from ..inference import jackknife_se, loo_sweep
from ..models.base import Family, Link, ModelSpec, WorkingCorr, make_workspace
from ..randomization import simple
from ..standardize import standardized_means
from .dgp import DgpSpec, Scenario, TrueEstimands, true_estimands, generate_trial


class SimulationAbort(RuntimeError):
    """Too many replicate failures to report comparable aggregates."""


MAX_FAILURE_SHARE = 0.02


def standard_model_grid(binary: bool, adjusted: bool) -> list[tuple[str, ModelSpec]]:
    """The four working models studied per outcome type."""
    link = Link.LOGIT if binary else Link.IDENTITY
    first = (("cluster_glm", ModelSpec(Family.CLUSTER_GLM_LOGIT, adjusted=adjusted))
             if binary else ("cluster_lm", ModelSpec(Family.CLUSTER_LM, adjusted=adjusted)))
    second = (("glmm_logit", ModelSpec(Family.GLMM_LOGIT, adjusted=adjusted))
              if binary else ("lmm", ModelSpec(Family.LMM, adjusted=adjusted)))
    return [
        first,
        second,
        ("gee_exchangeable", ModelSpec(Family.GEE, adjusted=adjusted, link=link,
                                       working_corr=WorkingCorr.EXCHANGEABLE)),
        ("gee_independence", ModelSpec(Family.GEE, adjusted=adjusted, link=link,
                                       working_corr=WorkingCorr.INDEPENDENCE)),
    ]


@dataclass(frozen=True)
class MetricsRow:
    estimator: str          # "coef" or "mrs"
    model: str
    adjusted: bool
    target: str             # "delta_c" or "delta_i"
    truth: float
    n_used: int
    n_failed: int
    mean_est: float
    bias_pct: float
    mcsd: float
    aese: float
    cov_pct: float
    cov_lo: float
    cov_hi: float


@dataclass(frozen=True)
class ExperimentResult:
    rows: tuple[MetricsRow, ...]
    truths: TrueEstimands
    seed: int
    n_sim: int
    failures: dict[str, int]
    se_policies: dict[str, str]


SE_POLICY = {
    Family.CLUSTER_LM: "heteroskedasticity-robust sandwich (HC1)",
    Family.CLUSTER_GLM_LOGIT: "model-based quasi-likelihood information",
    Family.LMM: "leave-one-cluster-out jackknife on the coefficient",
    Family.GLMM_LOGIT: "model-based observed information",
    Family.GLMM_LOG: "model-based observed information",
    Family.GEE: "Mancl-DeRouen bias-corrected sandwich",
}


def _replicate(dgp: DgpSpec, r: int, grid, scale: Contrast, want_coef: bool,
               want_mrs: bool):
    """All per-model estimates for one replicate; exceptions become failures."""
    data = generate_trial(dgp, dgp.seed + r)
    design = simple(0.5)
    probs = np.full(data.m, 0.5)
    omega_c, _ = weights(data, EstimandSpec(WeightScheme.CLUSTER))
    omega_i, _ = weights(data, EstimandSpec(WeightScheme.INDIVIDUAL))
    out: dict[str, dict] = {}
    for label, spec in grid:
        try:
            ws = make_workspace(spec, data)
            need_cov = want_coef and spec.family in (
                Family.CLUSTER_LM, Family.CLUSTER_GLM_LOGIT, Family.GEE,
                Family.GLMM_LOGIT, Family.GLMM_LOG)
            fitted = ws.fit(compute_cov=need_cov)
            entry: dict = {}
            coef_jackknife = want_coef and spec.family is Family.LMM
            if want_mrs or coef_jackknife:
                sweep = loo_sweep(data, design, spec, {"c": omega_c, "i": omega_i},
                                  collect_coef=coef_jackknife)
            if want_mrs:
                preds = (ws.predict(fitted, 1), ws.predict(fitted, 0))
                means_c = standardized_means(data, omega_c, probs, fitted,
                                             predictions=preds)
                means_i = standardized_means(data, omega_i, probs, fitted,
                                             predictions=preds)
                est_c = apply_contrast(scale, means_c.mu1, means_c.mu0)
                est_i = apply_contrast(scale, means_i.mu1, means_i.mu0)
                loo_c = np.array([apply_contrast(scale, m1, m0)
                                  for m1, m0 in sweep.mu_pairs["c"]])
                loo_i = np.array([apply_contrast(scale, m1, m0)
                                  for m1, m0 in sweep.mu_pairs["i"]])
                entry["mrs"] = {"delta_c": (est_c, jackknife_se(loo_c)),
                                "delta_i": (est_i, jackknife_se(loo_i))}
            if want_coef and spec.family is not Family.NULL:
                coef_se = (jackknife_se(sweep.coefs) if coef_jackknife
                           else fitted.treatment_se)
                entry["coef"] = (fitted.treatment_coef, coef_se)
            out[label] = entry
        except Exception as exc:   # noqa: BLE001 - per-replicate failure policy
            out[label] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def _replicate_star(args):
    return _replicate(*args)


def _map_replicates(task_args, threads: int):
    if threads <= 1:
        return [_replicate_star(a) for a in task_args]
    with mp.get_context("fork").Pool(processes=threads) as pool:
        return pool.map(_replicate_star, task_args, chunksize=4)


def _metrics(label: str, spec: ModelSpec, estimator: str, target: str, truth: float,
             estimates: np.ndarray, ses: np.ndarray, n_failed: int, m: int) -> MetricsRow:
    n = len(estimates)
    tcrit = sps.t.ppf(0.975, m - 1)
    covered = np.abs(estimates - truth) <= tcrit * ses
    cov = 100.0 * covered.mean()
    half = 1.96 * np.sqrt(cov * (100.0 - cov) / n)
    return MetricsRow(
        estimator=estimator, model=label, adjusted=spec.adjusted, target=target,
        truth=truth, n_used=n, n_failed=n_failed,
        mean_est=float(estimates.mean()),
        bias_pct=float(100.0 * (estimates.mean() - truth) / truth),
        mcsd=float(estimates.std(ddof=1)),
        aese=float(ses.mean()),
        cov_pct=float(cov), cov_lo=float(cov - half), cov_hi=float(cov + half))


def run_experiment(dgp: DgpSpec, n_sim: int,
                   model_grid: list[tuple[str, ModelSpec]] | None = None,
                   estimators: tuple[str, ...] = ("coef", "mrs"),
                   truths: TrueEstimands | None = None,
                   truth_size: int = 10**6,
                   threads: int = 1) -> ExperimentResult:
    """Replicate the trial, estimate with every model, aggregate the metrics."""
    if model_grid is None:
        model_grid = standard_model_grid(dgp.scenario.binary, adjusted=True)
    scale = dgp.scenario.contrast
    if truths is None:
        truths = true_estimands(dgp, truth_size)
    want_coef = "coef" in estimators
    want_mrs = "mrs" in estimators
    args = [(dgp, r, model_grid, scale, want_coef, want_mrs) for r in range(n_sim)]
    results = _map_replicates(args, threads)

    rows: list[MetricsRow] = []
    failures: dict[str, int] = {}
    for label, spec in model_grid:
        good = [res[label] for res in results if "error" not in res[label]]
        n_failed = n_sim - len(good)
        failures[label] = n_failed
        if n_failed > MAX_FAILURE_SHARE * n_sim:
            examples = [res[label]["error"] for res in results
                        if "error" in res[label]][:3]
            raise SimulationAbort(
                f"model {label}: {n_failed}/{n_sim} replicates failed "
                f"(limit {MAX_FAILURE_SHARE:.0%}); first errors: {examples}")
        if not good:
            continue
        for target, truth in (("delta_c", truths.delta_c), ("delta_i", truths.delta_i)):
            if want_mrs:
                est = np.array([g["mrs"][target][0] for g in good])
                ses = np.array([g["mrs"][target][1] for g in good])
                rows.append(_metrics(label, spec, "mrs", target, truth,
                                     est, ses, n_failed, dgp.m))
            if want_coef and "coef" in good[0]:
                est = np.array([g["coef"][0] for g in good])
                ses = np.array([g["coef"][1] for g in good])
                rows.append(_metrics(label, spec, "coef", target, truth,
                                     est, ses, n_failed, dgp.m))
    policies = {label: SE_POLICY.get(spec.family, "none")
                for label, spec in model_grid}
    return ExperimentResult(rows=tuple(rows), truths=truths, seed=dgp.seed,
                            n_sim=n_sim, failures=failures, se_policies=policies)


@dataclass(frozen=True)
class IcsPowerRow:
    delta: float
    model: str
    reject_pct: float
    n_used: int
    n_failed: int
    delta_c: float | None = None
    delta_i: float | None = None


def _ics_replicate(dgp: DgpSpec, r: int, grid, scale: Contrast):
    data = generate_trial(dgp, dgp.seed + r)
    design = simple(0.5)
    out = {}
    for label, spec in grid:
        try:
            res = ics_test(data, design, spec, scale=scale)
            out[label] = res.p_value
        except Exception as exc:   # noqa: BLE001
            out[label] = f"{type(exc).__name__}: {exc}"
    return out


def _ics_replicate_star(args):
    return _ics_replicate(*args)


def run_ics_power(dgp: DgpSpec, delta_grid: list[float], n_sim: int,
                  model_grid: list[tuple[str, ModelSpec]] | None = None,
                  level: float = 0.05, threads: int = 1,
                  truth_size: int = 0) -> list[IcsPowerRow]:
    """Rejection rates of the informative-cluster-size test over a delta grid."""
    if dgp.scenario not in (Scenario.CONT_ICS_TEST, Scenario.BIN_ICS_TEST):
        raise ValueError("power study requires an informative-cluster-size test scenario")
    if model_grid is None:
        model_grid = standard_model_grid(dgp.scenario.binary, adjusted=True)
    scale = dgp.scenario.contrast
    rows: list[IcsPowerRow] = []
    for delta in delta_grid:
        dgp_d = DgpSpec(scenario=dgp.scenario, m=dgp.m, expected_total=dgp.expected_total,
                        size_low=dgp.size_low, size_high=dgp.size_high,
                        re_variance=dgp.re_variance, delta=delta, seed=dgp.seed)
        truth = true_estimands(dgp_d, truth_size) if truth_size else None
        args = [(dgp_d, r, model_grid, scale) for r in range(n_sim)]
        if threads <= 1:
            results = [_ics_replicate_star(a) for a in args]
        else:
            with mp.get_context("fork").Pool(processes=threads) as pool:
                results = pool.map(_ics_replicate_star, args, chunksize=4)
        for label, _ in model_grid:
            pvals = [res[label] for res in results if isinstance(res[label], float)]
            n_failed = n_sim - len(pvals)
            if n_failed > MAX_FAILURE_SHARE * n_sim:
                raise SimulationAbort(
                    f"model {label} at delta={delta}: {n_failed}/{n_sim} replicates failed")
            rej = 100.0 * np.mean([p < level for p in pvals]) if pvals else np.nan
            rows.append(IcsPowerRow(
                delta=delta, model=label, reject_pct=float(rej),
                n_used=len(pvals), n_failed=n_failed,
                delta_c=None if truth is None else truth.delta_c,
                delta_i=None if truth is None else truth.delta_i))
    return rows
