"""Scenario orchestration: run many simulated trials, apply every requested
estimator and inference method, aggregate the performance criteria with their
Monte Carlo standard errors, and persist results as CSVs."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import yaml

from . import resample
from .data import TrialData
from .dgm import CalibrationResult, ScenarioParams, SymEffectLaw, _with_decline_sd, calibrate, simulate_trial, true_value_oracle
from .gest import G_METHODS, _Batch, evaluate_methods, ols_benchmark
from .mmrm import estimate_mmrm
from .regress import z_quantile
from .streams import StreamKey

Z_975 = z_quantile(0.975)

ALL_METHODS = ("established", "mod1", "mod2", "mod3", "mmrm")
_BOOT_SITE = 1_000
_ORACLE_SCENARIO = 999_000

TRIAL_COLUMNS = [
    "trial", "method", "theta_hat", "se_model", "se_boot", "se_jack",
    "reject_model", "reject_boot", "reject_jack",
    "ci_model_lo", "ci_model_hi", "ci_boot_lo", "ci_boot_hi",
    "ci_jack_lo", "ci_jack_hi", "ci_basic_lo", "ci_basic_hi",
    "iterations", "converged", "failed",
]


class ScenarioError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def _nan_row(trial_index: int, method: str) -> dict:
    row = {c: np.nan for c in TRIAL_COLUMNS}
    row.update(trial=trial_index, method=method, failed=True, converged=False, iterations=0)
    return row


def _wald_ci(theta: float, se: float):
    return theta - Z_975 * se, theta + Z_975 * se


def _reject(theta, se, alpha):
    return bool(theta / se < -z_quantile(1.0 - alpha)) if se and se > 0 else np.nan


def _run_trial(params, key, methods, inference, B, alpha, options):
    need_star = "benchmark" in methods
    trial = simulate_trial(params, key, include_y2_star=need_star)
    g_methods = tuple(m for m in methods if m in G_METHODS)
    rows = []

    g_rows = {}
    if g_methods:
        try:
            point = evaluate_methods(_Batch.from_trial(trial), g_methods, options)
            boot = (
                resample.bootstrap_all(trial, g_methods, B, key.child(_BOOT_SITE), options)
                if "bootstrap" in inference
                else None
            )
            jack = (
                resample.jackknife_all(trial, g_methods, options)
                if "jackknife" in inference
                else None
            )
            for m in g_methods:
                if not point[m]["ok"][0]:
                    g_rows[m] = None
                    continue
                theta = float(point[m]["theta"][0])
                se_model = float(point[m]["se"][0])
                row = dict.fromkeys(TRIAL_COLUMNS, np.nan)
                row.update(
                    method=m, theta_hat=theta, se_model=se_model, failed=False,
                    reject_model=_reject(theta, se_model, alpha),
                    iterations=int(point[m]["iterations"][0]),
                    converged=bool(point[m]["converged"][0]),
                )
                row["ci_model_lo"], row["ci_model_hi"] = _wald_ci(theta, se_model)
                if boot is not None:
                    br = boot[m]
                    row["se_boot"] = br.se
                    row["reject_boot"] = _reject(theta, br.se, alpha)
                    row["ci_boot_lo"], row["ci_boot_hi"] = _wald_ci(theta, br.se)
                    row["ci_basic_lo"], row["ci_basic_hi"] = br.ci_basic
                if jack is not None:
                    sj = jack[m]
                    row["se_jack"] = sj
                    row["reject_jack"] = _reject(theta, sj, alpha)
                    row["ci_jack_lo"], row["ci_jack_hi"] = _wald_ci(theta, sj)
                g_rows[m] = row
        except Exception:
            g_rows = {m: None for m in g_methods}

    for m in methods:
        if m in G_METHODS:
            rows.append(g_rows.get(m))
            continue
        try:
            if m == "mmrm":
                res = estimate_mmrm(trial)
                iterations = res.trace.iterations
                converged = res.trace.converged
            elif m == "benchmark":
                res = ols_benchmark(trial)
                iterations, converged = 0, True
            else:
                raise ValueError(f"unknown method {m!r}")
            theta, se_model = res.theta_hat, res.model_se
            row = dict.fromkeys(TRIAL_COLUMNS, np.nan)
            row.update(
                method=m, theta_hat=theta, se_model=se_model, failed=False,
                reject_model=_reject(theta, se_model, alpha),
                iterations=iterations, converged=converged,
            )
            row["ci_model_lo"], row["ci_model_hi"] = _wald_ci(theta, se_model)
            rows.append(row)
        except Exception:
            rows.append(None)
    return rows


def _chunk_worker(args):
    (params, scenario_id, master_seed, trial_indices, methods, inference, B, alpha, options) = args
    out = []
    for k in trial_indices:
        key = StreamKey(master_seed, (scenario_id, int(k)))
        for m, row in zip(methods, _run_trial(params, key, methods, inference, B, alpha, options)):
            if row is None:
                row = _nan_row(int(k), m)
            else:
                row["trial"] = int(k)
            out.append(row)
    return out


def run_scenario(
    params: ScenarioParams,
    nsim: int,
    methods=ALL_METHODS,
    inference=("model", "bootstrap", "jackknife"),
    B: int = 500,
    master_seed: int = 0,
    scenario_id: int = 0,
    threads: int = 0,
    alpha: float = 0.025,
    options: dict | None = None,
    fail_limit: float = 0.01,
) -> pd.DataFrame:
    """Simulate ``nsim`` trials and estimate each with the requested methods.

    Trial k draws from the stream keyed (scenario_id, k), so results are
    reproducible and independent of the worker count. Per-trial estimator
    failures are recorded, not fatal; more than ``fail_limit`` of failures
    for any method aborts the scenario as mis-specified.
    """
    if nsim < 1:
        raise ValueError("nsim must be at least 1")
    methods = tuple(methods)
    unknown = [m for m in methods if m not in ALL_METHODS + ("benchmark",)]
    if unknown:
        raise ValueError(f"unknown methods: {unknown}")
    if threads <= 0:
        threads = os.cpu_count() or 1
    trial_ids = np.arange(nsim)
    args = [
        (params, scenario_id, master_seed, chunk, methods, inference, B, alpha, options)
        for chunk in np.array_split(trial_ids, min(threads * 4, nsim))
        if chunk.size
    ]
    rows: list[dict] = []
    if threads == 1 or nsim == 1:
        for a in args:
            rows.extend(_chunk_worker(a))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(_chunk_worker, args):
                rows.extend(part)
    frame = pd.DataFrame(rows)
    frame = frame.sort_values(["trial", "method"], kind="stable").reset_index(drop=True)
    frame = frame[TRIAL_COLUMNS]
    for m in methods:
        f = frame[frame.method == m].failed.mean()
        if f > fail_limit:
            raise ScenarioError(f"method {m} failed on {f:.1%} of trials")
    return frame


@dataclass
class PerformanceSummary:
    method: str
    nsim: int
    n_failed: int
    theta_true: float
    bias: float
    mcse_bias: float
    emp_sd: float
    mcse_sd: float
    mean_se_model: float
    mean_se_boot: float
    mean_se_jack: float
    reject_model: float
    reject_boot: float
    reject_jack: float
    mcse_reject_model: float
    mcse_reject_boot: float
    mcse_reject_jack: float
    coverage_model: float
    coverage_boot: float
    coverage_jack: float
    coverage_basic: float


def _rate(series) -> tuple[float, float, int]:
    s = series.dropna()
    if not len(s):
        return math.nan, math.nan, 0
    p = float(s.mean())
    return p, math.sqrt(max(p * (1 - p), 0.0) / len(s)), len(s)


def _coverage(frame, lo, hi, theta_true) -> float:
    sub = frame[[lo, hi]].dropna()
    if not len(sub):
        return math.nan
    return float(((sub[lo] <= theta_true) & (theta_true <= sub[hi])).mean())


def summarize(results: pd.DataFrame, theta_true: float) -> pd.DataFrame:
    """Per-method performance: bias, spread, mean SEs, rejection rates and
    coverage, each Monte Carlo estimate with its standard error."""
    if not len(results):
        raise ValueError("no results to summarize")
    out = []
    for m, grp in results.groupby("method", sort=False):
        ok = grp[~grp.failed.astype(bool)]
        th = ok.theta_hat.to_numpy(dtype=float)
        nsim = len(ok)
        emp_sd = float(np.std(th, ddof=1)) if nsim > 1 else math.nan
        rej_m = _rate(ok.reject_model)
        rej_b = _rate(ok.reject_boot)
        rej_j = _rate(ok.reject_jack)
        out.append(
            PerformanceSummary(
                method=m,
                nsim=nsim,
                n_failed=int(grp.failed.astype(bool).sum()),
                theta_true=theta_true,
                bias=float(th.mean() - theta_true) if nsim else math.nan,
                mcse_bias=emp_sd / math.sqrt(nsim) if nsim > 1 else math.nan,
                emp_sd=emp_sd,
                mcse_sd=emp_sd / math.sqrt(2.0 * (nsim - 1)) if nsim > 1 else math.nan,
                mean_se_model=float(ok.se_model.mean()),
                mean_se_boot=float(ok.se_boot.mean()),
                mean_se_jack=float(ok.se_jack.mean()),
                reject_model=rej_m[0], reject_boot=rej_b[0], reject_jack=rej_j[0],
                mcse_reject_model=rej_m[1], mcse_reject_boot=rej_b[1], mcse_reject_jack=rej_j[1],
                coverage_model=_coverage(ok, "ci_model_lo", "ci_model_hi", theta_true),
                coverage_boot=_coverage(ok, "ci_boot_lo", "ci_boot_hi", theta_true),
                coverage_jack=_coverage(ok, "ci_jack_lo", "ci_jack_hi", theta_true),
                coverage_basic=_coverage(ok, "ci_basic_lo", "ci_basic_hi", theta_true),
            )
        )
    return pd.DataFrame([vars(s) for s in out])


@dataclass
class GridCell:
    sym_sd: float
    axis2: str
    axis2_value: float
    calibration: CalibrationResult
    theta_true: float
    summary: pd.DataFrame


def run_grid(
    sym_sds,
    axis2: str,
    axis2_values,
    base_params: ScenarioParams,
    nsim: int,
    master_seed: int = 0,
    methods=("established", "mod1", "mod2", "mod3", "benchmark"),
    inference=("model",),
    B: int = 200,
    threads: int = 0,
    n_oracle: int = 1_000_000,
    target_sd: float = 14.0,
    decline_share: float = 0.5,
    calib_n: int = 200_000,
) -> list[GridCell]:
    """Scenario grid over the symptomatic-effect SD and a second axis
    (``sd_y2``: total SD of the unaffected end-of-study score, or
    ``decline_share``: decline-rate share of its non-baseline variance).
    Each cell is calibrated, its true value computed by oracle, and all
    requested methods summarized."""
    if axis2 not in ("sd_y2", "decline_share"):
        raise ValueError("axis2 must be 'sd_y2' or 'decline_share'")
    cells = []
    for j, a2 in enumerate(axis2_values):
        target = float(a2) if axis2 == "sd_y2" else target_sd
        share = decline_share if axis2 == "sd_y2" else float(a2)
        cal = calibrate(
            target, share, base_params,
            StreamKey(master_seed, (_ORACLE_SCENARIO, j)), n_mc=calib_n,
        )
        cell_base = replace(
            _with_decline_sd(base_params, math.sqrt(cal.decline_var)), tau=cal.tau
        )
        theta_true = (
            0.0
            if base_params.e_dm == 1.0
            else true_value_oracle(
                cell_base, n_oracle, StreamKey(master_seed, (_ORACLE_SCENARIO + 1, j))
            ).theta
        )
        for i, ssd in enumerate(sym_sds):
            params = replace(cell_base, sym_effect=SymEffectLaw.from_sd(float(ssd)))
            scen_id = 1_000 + j * 100 + i
            frame = run_scenario(
                params, nsim, methods=methods, inference=inference, B=B,
                master_seed=master_seed, scenario_id=scen_id, threads=threads,
            )
            cells.append(
                GridCell(
                    sym_sd=float(ssd), axis2=axis2, axis2_value=float(a2),
                    calibration=cal, theta_true=theta_true,
                    summary=summarize(frame, theta_true),
                )
            )
    return cells


def heatmap_frame(cells: list[GridCell], comparator: str = "established") -> pd.DataFrame:
    """Relative difference (in % of the comparator's empirical SD) between
    each method's empirical SD and the comparator's, one row per cell and
    method."""
    rows = []
    for cell in cells:
        s = cell.summary.set_index("method")
        if comparator not in s.index:
            raise ValueError(f"comparator {comparator!r} missing from cell summaries")
        ref = float(s.loc[comparator, "emp_sd"])
        for m in s.index:
            if m == comparator:
                continue
            rows.append(
                dict(
                    sym_sd=cell.sym_sd, axis2=cell.axis2, axis2_value=cell.axis2_value,
                    method=m, comparator=comparator,
                    emp_sd=float(s.loc[m, "emp_sd"]), emp_sd_comparator=ref,
                    rel_sd_diff_pct=100.0 * (float(s.loc[m, "emp_sd"]) - ref) / ref,
                )
            )
    return pd.DataFrame(rows)


def emit_results(
    outdir,
    trials: pd.DataFrame | None = None,
    summary: pd.DataFrame | None = None,
    heatmap: pd.DataFrame | None = None,
) -> dict:
    """Write whichever result tables are given; returns {name: path}."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}
    if trials is not None:
        paths["trials"] = os.path.join(outdir, "trials.csv")
        trials.to_csv(paths["trials"], index=False)
    if summary is not None:
        paths["summary"] = os.path.join(outdir, "summary.csv")
        summary.to_csv(paths["summary"], index=False)
    if heatmap is not None:
        paths["heatmap"] = os.path.join(outdir, "heatmap.csv")
        heatmap.to_csv(paths["heatmap"], index=False)
    return paths


def read_trials(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in TRIAL_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"trials file is missing columns: {', '.join(missing)}")
    return frame


# ---------------------------------------------------------------------------
# Scenario configuration files
# ---------------------------------------------------------------------------


@dataclass
class StudyConfig:
    params: ScenarioParams
    nsim: int = 2000
    B: int = 500
    methods: tuple = ALL_METHODS
    inference: tuple = ("model", "bootstrap", "jackknife")
    seed: int = 0
    threads: int = 0
    theta_true: float | None = None
    calibrate: dict | None = None
    grid: dict | None = None
    oracle_n: int = 10_000_000


_SCENARIO_KEYS = {
    "n", "p_treat", "e_dm", "baseline_mean", "baseline_cov", "baseline_bounds",
    "richards_beta", "tau", "scale_max", "fine_step", "horizon", "observed_grid",
    "ie_times", "ie_mechanism", "ie_center", "ie_slope", "ie_threshold",
    "sym_effect", "outcome_rounding",
}


def load_config(path) -> StudyConfig:
    """Parse a YAML scenario/study configuration; errors name the key."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if raw.get("schema_version") != 1:
        raise ConfigError("schema_version: expected 1")
    scen = dict(raw.get("scenario") or {})
    unknown = set(scen) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"scenario: unknown keys {sorted(unknown)}")
    has_calibrate = bool(raw.get("calibrate"))
    if "tau" not in scen and not has_calibrate:
        raise ConfigError("scenario: missing key 'tau' (and no calibrate block)")
    for key in ("baseline_mean", "baseline_bounds", "observed_grid", "ie_times"):
        if key in scen:
            scen[key] = tuple(scen[key])
    if "baseline_cov" in scen:
        scen["baseline_cov"] = tuple(tuple(r) for r in scen["baseline_cov"])
    if "sym_effect" in scen:
        scen["sym_effect"] = SymEffectLaw(**scen["sym_effect"])
    try:
        params = ScenarioParams(**scen)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    study = dict(raw.get("study") or {})
    cfg = StudyConfig(
        params=params,
        nsim=int(study.get("nsim", 2000)),
        B=int(study.get("bootstrap_B", 500)),
        methods=tuple(study.get("methods", ALL_METHODS)),
        inference=tuple(study.get("inference", ("model", "bootstrap", "jackknife"))),
        seed=int(study.get("seed", 0)),
        threads=int(study.get("threads", 0)),
        theta_true=study.get("theta_true"),
        calibrate=raw.get("calibrate"),
        grid=raw.get("grid"),
        oracle_n=int(study.get("oracle_n", 10_000_000)),
    )
    bad = [m for m in cfg.methods if m not in ALL_METHODS + ("benchmark",)]
    if bad:
        raise ConfigError(f"study.methods: unknown methods {bad}")
    return cfg


def resolve_theta_true(cfg: StudyConfig, n_oracle: int | None = None) -> float:
    """Config value if given; 0 under the null; otherwise the oracle."""
    if cfg.theta_true is not None:
        return float(cfg.theta_true)
    if cfg.params.e_dm == 1.0:
        return 0.0
    n = n_oracle or cfg.oracle_n
    return true_value_oracle(
        cfg.params, n, StreamKey(cfg.seed, (_ORACLE_SCENARIO,))
    ).theta
