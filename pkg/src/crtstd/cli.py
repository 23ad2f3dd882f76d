"""Command-line front end: analyze, ics-test, simulate, truth, validate.

Configuration is a key = value text file (# comments allowed); every command
takes --config plus optional overrides. Machine outputs serialize numbers
with 17 significant digits and carry provenance columns (seed, config hash,
package version) on every row, so identical inputs produce identical bytes.

Exit codes: 0 success, 2 input or validation problem, 3 estimation failure,
4 simulation aborted on excess replicate failures.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import __version__
from .core import (ClusterRecord, Contrast, EstimandSpec, EstimationError,
                   TrialData, ValidationError, WeightScheme, validate)
from .ics import ics_test
from .models.base import ConvergenceError, Family, Link, Marginalization, ModelSpec, WorkingCorr
from .randomization import (PositivityError, RandomizationDesign, constrained,
                            load_scheme_matrix, pair_matched, simple, stratified)
from .sim import (DgpSpec, Scenario, SimulationAbort, run_experiment,
                  run_ics_power, standard_model_grid, true_estimands)
from .standardize import estimate

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ESTIMATION = 3
EXIT_SIM_ABORT = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing

def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip().lower()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def load_config(path: str) -> tuple[dict[str, str], str]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text), config_hash(text)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _bool(cfg: dict, key: str, default: bool) -> bool:
    raw = cfg.get(key)
    if raw is None:
        return default
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _float(cfg: dict, key: str, default: float | None = None) -> float:
    raw = cfg.get(key)
    if raw is None:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc


def _int(cfg: dict, key: str, default: int | None = None) -> int:
    raw = cfg.get(key)
    if raw is None:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc


def _list(cfg: dict, key: str) -> list[str]:
    raw = cfg.get(key, "")
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


_MODEL_LABELS = {
    "null": (Family.NULL, {}),
    "cluster_lm": (Family.CLUSTER_LM, {}),
    "lm": (Family.CLUSTER_LM, {}),
    "cluster_glm": (Family.CLUSTER_GLM_LOGIT, {}),
    "cluster_glm_logit": (Family.CLUSTER_GLM_LOGIT, {}),
    "glm": (Family.CLUSTER_GLM_LOGIT, {}),
    "lmm": (Family.LMM, {}),
    "glmm": (Family.GLMM_LOGIT, {}),
    "glmm_logit": (Family.GLMM_LOGIT, {}),
    "glmm_log": (Family.GLMM_LOG, {}),
    "gee_independence": (Family.GEE, {"working_corr": WorkingCorr.INDEPENDENCE}),
    "gee_ind": (Family.GEE, {"working_corr": WorkingCorr.INDEPENDENCE}),
    "gee_exchangeable": (Family.GEE, {"working_corr": WorkingCorr.EXCHANGEABLE}),
    "gee_exch": (Family.GEE, {"working_corr": WorkingCorr.EXCHANGEABLE}),
    "gee_arm_exchangeable": (Family.GEE, {"working_corr": WorkingCorr.ARM_EXCHANGEABLE}),
    "gee_arm": (Family.GEE, {"working_corr": WorkingCorr.ARM_EXCHANGEABLE}),
}


def model_spec_from_config(label: str, cfg: dict[str, str]) -> ModelSpec:
    low = label.lower()
    if low not in _MODEL_LABELS:
        raise ConfigError(f"unknown model {label!r}; choose from "
                          f"{sorted(set(_MODEL_LABELS))}")
    family, extra = _MODEL_LABELS[low]
    link = cfg.get("link", "identity").lower()
    try:
        link_val = Link(link)
    except ValueError as exc:
        raise ConfigError(f"link: expected identity|logit|log, got {link!r}") from exc
    marg = cfg.get("marginalization", "quadrature").lower()
    try:
        marg_val = Marginalization(marg)
    except ValueError as exc:
        raise ConfigError(f"marginalization: expected quadrature|hedeker, got {marg!r}") from exc
    return ModelSpec(
        family=family,
        adjusted=_bool(cfg, "adjusted", True),
        include_size=_bool(cfg, "include_size", True),
        contextual=_bool(cfg, "contextual", True),
        reml=_bool(cfg, "reml", False),
        link=link_val,
        marginalization=marg_val,
        prediction_nodes=_int(cfg, "prediction_nodes", 64),
        likelihood_nodes=_int(cfg, "likelihood_nodes", 25),
        **extra,
    )


def design_from_config(cfg: dict[str, str]) -> RandomizationDesign:
    kind = cfg.get("design", "simple").lower()
    if kind == "simple":
        return simple(_float(cfg, "pi", 0.5))
    if kind == "pair_matched":
        return pair_matched()
    if kind == "stratified":
        probs: dict[str, float] = {}
        for tok in _list(cfg, "stratum_probs"):
            if ":" not in tok:
                raise ConfigError(f"stratum_probs: expected name:probability, got {tok!r}")
            name, p = tok.rsplit(":", 1)
            try:
                probs[name.strip()] = float(p)
            except ValueError as exc:
                raise ConfigError(f"stratum_probs: bad probability in {tok!r}") from exc
        if not probs:
            raise ConfigError("stratified design requires stratum_probs")
        return stratified(probs)
    if kind == "constrained":
        path = cfg.get("scheme_matrix")
        if not path:
            raise ConfigError("constrained design requires scheme_matrix = <csv path>")
        t = load_scheme_matrix(path, header=_bool(cfg, "scheme_matrix_header", False))
        return constrained(t)
    raise ConfigError(f"design: expected simple|stratified|pair_matched|constrained, "
                      f"got {kind!r}")


def contrast_from_config(cfg: dict[str, str], key: str = "contrast",
                         default: str = "difference") -> Contrast:
    raw = cfg.get(key, default).lower()
    try:
        return Contrast(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected one of "
                          f"{[c.value for c in Contrast]}, got {raw!r}") from exc


def scenario_from_config(cfg: dict[str, str]) -> Scenario:
    raw = cfg.get("scenario")
    if raw is None:
        raise ConfigError("missing required config key 'scenario'")
    try:
        return Scenario(raw.lower())
    except ValueError as exc:
        raise ConfigError(f"scenario: expected one of {[s.value for s in Scenario]}, "
                          f"got {raw!r}") from exc


# ---------------------------------------------------------------------------
# CSV ingestion

@dataclass(frozen=True)
class IngestSpec:
    input: str
    cluster_col: str
    treatment_col: str
    outcome_col: str
    covariate_cols: tuple[str, ...]
    cluster_covariate_cols: tuple[str, ...]
    stratum_col: str | None


def ingest_spec_from_config(cfg: dict[str, str]) -> IngestSpec:
    for key in ("input", "cluster_col", "treatment_col", "outcome_col"):
        if key not in cfg:
            raise ConfigError(f"missing required config key {key!r}")
    return IngestSpec(
        input=cfg["input"],
        cluster_col=cfg["cluster_col"],
        treatment_col=cfg["treatment_col"],
        outcome_col=cfg["outcome_col"],
        covariate_cols=tuple(_list(cfg, "covariate_cols")),
        cluster_covariate_cols=tuple(_list(cfg, "cluster_covariate_cols")),
        stratum_col=cfg.get("stratum_col") or None,
    )


def read_trial(spec: IngestSpec) -> TrialData:
    """Long-format CSV, one row per individual, header required."""
    try:
        df = pd.read_csv(spec.input)
    except FileNotFoundError as exc:
        raise ValidationError(f"input file not found: {spec.input}") from exc
    needed = [spec.cluster_col, spec.treatment_col, spec.outcome_col,
              *spec.covariate_cols, *spec.cluster_covariate_cols]
    if spec.stratum_col:
        needed.append(spec.stratum_col)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValidationError(f"input is missing columns: {missing}")
    problems: list[str] = []
    tr = df[spec.treatment_col]
    bad = df.index[~tr.isin([0, 1])]
    for i in bad[:5]:
        problems.append(f"line {i + 2}: treatment value {tr.iloc[i]!r} is not 0/1")
    clusters: list[ClusterRecord] = []
    for cid, grp in df.groupby(spec.cluster_col, sort=False):
        if grp[spec.treatment_col].nunique() > 1:
            first = grp.index[grp[spec.treatment_col].ne(grp[spec.treatment_col].iloc[0])][0]
            problems.append(f"line {first + 2}: treatment changes within cluster {cid!r}")
            continue
        for col in spec.cluster_covariate_cols:
            if grp[col].nunique() > 1:
                first = grp.index[grp[col].ne(grp[col].iloc[0])][0]
                problems.append(
                    f"line {first + 2}: cluster covariate {col!r} varies within "
                    f"cluster {cid!r}")
        if spec.stratum_col and grp[spec.stratum_col].nunique() > 1:
            first = grp.index[grp[spec.stratum_col].ne(grp[spec.stratum_col].iloc[0])][0]
            problems.append(f"line {first + 2}: stratum varies within cluster {cid!r}")
        x = (grp[list(spec.covariate_cols)].to_numpy(dtype=float)
             if spec.covariate_cols else np.empty((len(grp), 0)))
        h = (grp.iloc[0][list(spec.cluster_covariate_cols)].to_numpy(dtype=float)
             if spec.cluster_covariate_cols else np.empty(0))
        clusters.append(ClusterRecord(
            cluster_id=str(cid),
            treatment=int(grp[spec.treatment_col].iloc[0]),
            outcomes=grp[spec.outcome_col].to_numpy(dtype=float),
            covariates=x, cluster_covariates=h,
            stratum=str(grp[spec.stratum_col].iloc[0]) if spec.stratum_col else None))
    if problems:
        raise ValidationError("; ".join(problems))
    return TrialData(clusters)


# ---------------------------------------------------------------------------
# output formatting

def fmt17(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def fmt_human(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "yes" if x else "no"
    if isinstance(x, (float, np.floating)):
        return "%.4g" % float(x)
    return str(x)


def write_rows(rows: list[dict], fmt: str, output: str | None) -> None:
    if not rows:
        text = ""
    elif fmt == "csv":
        header = ",".join(rows[0].keys())
        lines = [header] + [",".join(fmt17(v) for v in r.values()) for r in rows]
        text = "\n".join(lines) + "\n"
    elif fmt == "record":
        blocks = ["\n".join(f"{k} = {fmt17(v)}" for k, v in r.items()) for r in rows]
        text = "\n\n".join(blocks) + "\n"
    else:
        cols = list(rows[0].keys())
        cells = [[fmt_human(r[c]) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
        head = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
        body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        text = "\n".join([head] + body) + "\n"
    if output:
        with open(output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands

def _provenance(seed, cfg_hash: str) -> dict:
    return {"seed": seed if seed is not None else "",
            "config_sha256": cfg_hash, "version": __version__}


def cmd_analyze(cfg: dict[str, str], cfg_hash: str, args) -> int:
    ing = ingest_spec_from_config(cfg)
    design = design_from_config(cfg)
    labels = _list(cfg, "models") or [cfg.get("model", "lmm")]
    specs = [(lab, model_spec_from_config(lab, cfg)) for lab in labels]
    level = _float(cfg, "ci_level", 0.95)
    con = contrast_from_config(cfg)
    which = cfg.get("weight_scheme", "both").lower()
    if which == "both":
        schemes = [("delta_c", WeightScheme.CLUSTER), ("delta_i", WeightScheme.INDIVIDUAL)]
    elif which in ("cluster", "individual"):
        tag = "delta_c" if which == "cluster" else "delta_i"
        schemes = [(tag, WeightScheme(which))]
    else:
        raise ConfigError(f"weight_scheme: expected cluster|individual|both, got {which!r}")
    refit_policy = cfg.get("refit_policy", "error")

    data = read_trial(ing)
    violations = validate(data)
    if violations:
        for v in violations:
            print(f"validation: {v}", file=sys.stderr)
        return EXIT_INPUT

    rows = []
    for label, spec in specs:
        for tag, scheme in schemes:
            res = estimate(data, design, spec,
                           EstimandSpec(scheme, con), level=level,
                           refit_policy=refit_policy)
            icc_val = res.icc
            if isinstance(icc_val, tuple):
                icc_val = "/".join(fmt17(v) for v in icc_val)
            rows.append({
                "model": label, "adjusted": spec.adjusted, "estimand": tag,
                "contrast": con.value, "estimate": res.estimate.estimate,
                "se": res.se, "ci_lo": res.ci[0], "ci_hi": res.ci[1], "df": res.df,
                "mu1": res.mu1, "mu0": res.mu0,
                "se_delta_method": res.se_delta_method,
                "icc": icc_val,
                "n_clusters": data.m,
                "refit_failures": len(res.refit_failures),
                **_provenance(args.seed, cfg_hash),
            })
    write_rows(rows, args.format, args.output)
    return EXIT_OK


def cmd_ics_test(cfg: dict[str, str], cfg_hash: str, args) -> int:
    ing = ingest_spec_from_config(cfg)
    design = design_from_config(cfg)
    label = cfg.get("model", "lmm")
    spec = model_spec_from_config(label, cfg)
    scale = contrast_from_config(cfg, key="scale", default="difference")
    data = read_trial(ing)
    violations = validate(data)
    if violations:
        for v in violations:
            print(f"validation: {v}", file=sys.stderr)
        return EXIT_INPUT
    res = ics_test(data, design, spec, scale=scale,
                   refit_policy=cfg.get("refit_policy", "error"))
    rows = [{
        "model": label, "scale": scale.value, "d_hat": res.d_hat,
        "se": float(np.sqrt(res.v_hat)), "statistic": res.statistic, "df": res.df,
        "p_value": res.p_value, "delta_c": res.delta_c, "delta_i": res.delta_i,
        **_provenance(args.seed, cfg_hash),
    }]
    write_rows(rows, args.format, args.output)
    return EXIT_OK


def _sim_grid(cfg: dict[str, str], scenario: Scenario) -> list[tuple[str, ModelSpec]]:
    labels = _list(cfg, "models")
    if not labels:
        return standard_model_grid(scenario.binary, adjusted=_bool(cfg, "adjusted", True))
    link_default = "logit" if scenario.binary else "identity"
    cfg_with_link = {**cfg, "link": cfg.get("link", link_default)}
    return [(lab, model_spec_from_config(lab, cfg_with_link)) for lab in labels]


def cmd_simulate(cfg: dict[str, str], cfg_hash: str, args) -> int:
    scenario = scenario_from_config(cfg)
    seed = args.seed if args.seed is not None else _int(cfg, "seed", 0)
    dgp = DgpSpec(scenario=scenario, m=_int(cfg, "m"),
                  expected_total=_int(cfg, "expected_total", 3000),
                  re_variance=_float(cfg, "re_variance", 0.2),
                  delta=_float(cfg, "delta", 0.0), seed=seed)
    n_sim = _int(cfg, "n_sim")
    grid = _sim_grid(cfg, scenario)
    threads = args.threads
    if scenario in (Scenario.CONT_ICS_TEST, Scenario.BIN_ICS_TEST):
        deltas = [float(t) for t in _list(cfg, "delta_grid")] or [dgp.delta]
        rows_raw = run_ics_power(dgp, deltas, n_sim, model_grid=grid, threads=threads,
                                 truth_size=_int(cfg, "truth_size", 0))
        rows = [{"delta": r.delta, "model": r.model, "reject_pct": r.reject_pct,
                 "n_used": r.n_used, "n_failed": r.n_failed,
                 "delta_c": r.delta_c, "delta_i": r.delta_i,
                 **_provenance(seed, cfg_hash)} for r in rows_raw]
        write_rows(rows, args.format, args.output)
        return EXIT_OK
    estimators = tuple(_list(cfg, "estimators")) or ("coef", "mrs")
    result = run_experiment(dgp, n_sim, model_grid=grid, estimators=estimators,
                            truth_size=_int(cfg, "truth_size", 10**6), threads=threads)
    rows = [{
        "estimator": r.estimator, "model": r.model, "adjusted": r.adjusted,
        "target": r.target, "truth": r.truth, "n_used": r.n_used,
        "n_failed": r.n_failed, "mean_est": r.mean_est, "bias_pct": r.bias_pct,
        "mcsd": r.mcsd, "aese": r.aese, "cov_pct": r.cov_pct,
        "cov_lo": r.cov_lo, "cov_hi": r.cov_hi,
        **_provenance(seed, cfg_hash),
    } for r in result.rows]
    write_rows(rows, args.format, args.output)
    if args.output:
        meta = {
            "command": "simulate", "scenario": scenario.value, "m": dgp.m,
            "n_sim": n_sim, "seed": seed,
            "truth_delta_c": result.truths.delta_c, "truth_delta_i": result.truths.delta_i,
            "truth_mc_se_c": result.truths.mc_se_c, "truth_mc_se_i": result.truths.mc_se_i,
            "scale": result.truths.scale.value,
            **{f"failures_{k}": v for k, v in result.failures.items()},
            **{f"se_policy_{k}": v for k, v in result.se_policies.items()},
            "config_sha256": cfg_hash, "version": __version__,
        }
        write_rows([meta], "record", args.output + ".meta")
    return EXIT_OK


def cmd_truth(cfg: dict[str, str], cfg_hash: str, args) -> int:
    scenario = scenario_from_config(cfg)
    seed = args.seed if args.seed is not None else _int(cfg, "seed", 0)
    dgp = DgpSpec(scenario=scenario, m=_int(cfg, "m"),
                  expected_total=_int(cfg, "expected_total", 3000),
                  re_variance=_float(cfg, "re_variance", 0.2),
                  delta=_float(cfg, "delta", 0.0), seed=seed)
    size = _int(cfg, "size", 10**6)
    t = true_estimands(dgp, size)
    rows = [{
        "scenario": scenario.value, "m": dgp.m, "size": size, "scale": t.scale.value,
        "delta_c": t.delta_c, "mc_se_c": t.mc_se_c,
        "delta_i": t.delta_i, "mc_se_i": t.mc_se_i,
        **_provenance(seed, cfg_hash),
    }]
    write_rows(rows, args.format, args.output)
    return EXIT_OK


def cmd_validate(cfg: dict[str, str], cfg_hash: str, args) -> int:
    ing = ingest_spec_from_config(cfg)
    data = read_trial(ing)
    violations = validate(data)
    for v in violations:
        print(f"validation: {v}", file=sys.stderr)
    if violations:
        return EXIT_INPUT
    print(f"ok: {data.m} clusters, {int(data.sizes.sum())} individuals")
    return EXIT_OK


_COMMANDS = {
    "analyze": cmd_analyze,
    "ics-test": cmd_ics_test,
    "simulate": cmd_simulate,
    "truth": cmd_truth,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crtstd",
        description="Model-robust standardization for cluster-randomized trials")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value configuration file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--output", default=None, help="write to a file instead of stdout")
        p.add_argument("--format", choices=("table", "csv", "record"), default="table")
        p.add_argument("--validate-config", action="store_true",
                       help="parse and check the configuration, then exit")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, cfg_hash = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.output is None:
        args.output = cfg.get("output")
    if args.validate_config:
        try:
            if args.command in ("analyze", "ics-test", "validate"):
                ingest_spec_from_config(cfg)
                design_from_config(cfg)
                for lab in _list(cfg, "models") or [cfg.get("model", "lmm")]:
                    model_spec_from_config(lab, cfg)
            else:
                scenario_from_config(cfg)
                _int(cfg, "m")
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        print("config ok")
        return EXIT_OK
    try:
        return _COMMANDS[args.command](cfg, cfg_hash, args)
    except (ConfigError, ValidationError, PositivityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationAbort as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_SIM_ABORT
    except (ConvergenceError, EstimationError, ValueError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
