"""Trial simulation: bounded-scale disease progression driven by a beta
regression with a generalized-logistic link, outcome-dependent initiation of
symptomatic medication, and the additive symptomatic effect on observed
scores. Also the large-sample oracle for the true direct effect and the
variance calibration used by the scenario grids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TrialData
from .streams import (
    StreamKey,
    TruncatedBivariateNormalSpec,
    derive_stream,
    sample_beta_mean_tau,
    sample_truncated_bivariate_normal,
    sample_truncated_normal,
)

_EPS = 1e-9

# Stream purposes (path components under a trial key).
_SITE_TREAT = 0
_SITE_BASELINE = 1
_SITE_ESYM = 2
_SITE_STEP = 10  # + fine-grid step index
_SITE_IE = 100  # + initiation-visit index


class CalibrationError(RuntimeError):
    """Variance calibration could not reach its target."""


@dataclass(frozen=True)
class SymEffectLaw:
    """Truncated-normal law of the per-patient symptomatic shift (score points,
    negative = improvement on the observed scale)."""

    mean: float = -2.6
    sd: float = 2.0
    lo: float = -6.6
    hi: float = 1.4

    @classmethod
    def from_sd(cls, sd: float, mean: float = -2.6) -> "SymEffectLaw":
        """Law with bounds at mean +/- 2 sd, the convention of the scenario grids."""
        return cls(mean=mean, sd=sd, lo=mean - 2.0 * sd, hi=mean + 2.0 * sd)


@dataclass(frozen=True)
class ScenarioParams:
    """All design and generative parameters of one trial scenario.

    The default decline-rate mean (0.455 link-units per year) is calibrated
    so that halving the decline rate in the active arm produces the
    documented true direct effect of -5.83 points at the default variance
    parameters; see the package README for the calibration note.
    """

    n: int = 154
    p_treat: float = 0.5
    e_dm: float = 1.0
    baseline_mean: tuple[float, float] = (27.0, 0.455)
    baseline_cov: tuple[tuple[float, float], tuple[float, float]] = (
        (49.0, 0.69),
        (0.69, 0.072),
    )
    baseline_bounds: tuple[float, float] = (10.0, 50.0)
    richards_beta: float = 2.4
    tau: float | None = 174.15  # None runs the noise-free mean chain
    scale_max: float = 85.0
    fine_step: float = 0.25
    horizon: float = 2.0
    observed_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    ie_times: tuple[float, ...] = (0.5, 1.0, 1.5)
    ie_mechanism: str = "sigmoid"  # "sigmoid" | "threshold"
    ie_center: float = 29.0
    ie_slope: float = 1.0
    ie_threshold: float = 40.5
    sym_effect: SymEffectLaw = field(default_factory=SymEffectLaw)
    outcome_rounding: bool = True

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not 0.0 <= self.p_treat <= 1.0:
            raise ValueError("p_treat must lie in [0, 1]")
        if not 0.0 < self.e_dm <= 1.0:
            raise ValueError("e_dm must lie in (0, 1]")
        if self.richards_beta <= 0:
            raise ValueError("richards_beta must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")
        lo, hi = self.baseline_bounds
        if not (0.0 < lo < hi < self.scale_max):
            raise ValueError("baseline_bounds must sit strictly inside (0, scale_max)")
        fine = set(np.round(self.fine_grid, 9).tolist())
        if any(round(t, 9) not in fine for t in self.observed_grid):
            raise ValueError("observed_grid must be a subset of the fine grid")
        interior = set(self.observed_grid) - {0.0, self.horizon}
        if any(t not in interior for t in self.ie_times):
            raise ValueError("ie_times must be interior observed visits")
        if self.ie_mechanism not in ("sigmoid", "threshold"):
            raise ValueError("ie_mechanism must be 'sigmoid' or 'threshold'")

    @property
    def fine_grid(self) -> np.ndarray:
        k = int(round(self.horizon / self.fine_step))
        return np.round(np.arange(k + 1) * self.fine_step, 9)

    @property
    def baseline_spec(self) -> TruncatedBivariateNormalSpec:
        return TruncatedBivariateNormalSpec(
            mean=self.baseline_mean,
            cov=self.baseline_cov,
            first_coord_bounds=self.baseline_bounds,
        )


def richards_link(x, beta: float):
    """Generalized-logistic link g(x) = log(x^beta / (1 - x^beta)) on (0, 1)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValueError("link argument must lie strictly inside (0, 1)")
    xb = np.exp(beta * np.log(x))
    out = beta * np.log(x) - np.log1p(-xb)
    return out if out.shape else float(out)


def richards_inverse(eta, beta: float):
    """Inverse link h(eta) = (1 + exp(-eta))^(-1/beta); values in (0, 1)."""
    eta = np.asarray(eta, dtype=float)
    out = np.exp(-np.logaddexp(0.0, -eta) / beta)
    return out if out.shape else float(out)


def _clip_unit(x):
    return np.clip(x, _EPS, 1.0 - _EPS)


def _step_mean(x_prev, alpha, treat, params: ScenarioParams, delta_years: float):
    """Normalized next-step mean: h(g(x_prev) + alpha * delta * e_dm^treat)."""
    eta = richards_link(_clip_unit(x_prev), params.richards_beta)
    drift = alpha * delta_years * np.power(params.e_dm, treat)
    return richards_inverse(eta + drift, params.richards_beta)


def progress_step(y_prev_star, alpha, treat, params: ScenarioParams, delta_years: float, stream):
    """One progression step: beta draw around the link-scale drifted mean.

    Returns the next underlying score (same scale as ``y_prev_star``).
    With ``params.tau`` None the mean itself is returned (noise-free chain).
    """
    if delta_years <= 0:
        raise ValueError("delta_years must be positive")
    x_prev = np.asarray(y_prev_star, dtype=float) / params.scale_max
    mean_x = _clip_unit(_step_mean(x_prev, alpha, treat, params, delta_years))
    if params.tau is None:
        out = params.scale_max * mean_x
    else:
        out = params.scale_max * sample_beta_mean_tau(mean_x, params.tau, stream)
    return out if np.ndim(y_prev_star) else float(out)


def _round_clip(values, params: ScenarioParams):
    clipped = np.clip(values, 0.0, params.scale_max)
    return np.round(clipped) if params.outcome_rounding else clipped


def _march_chain(params: ScenarioParams, y0, alpha, treat, key: StreamKey):
    """Run the fine-grid chain; return {observed time: underlying score}."""
    grid = params.fine_grid
    observed = {round(t, 9) for t in params.observed_grid}
    x = np.asarray(y0, dtype=float) / params.scale_max
    ystar = {0.0: np.asarray(y0, dtype=float)}
    for i in range(1, grid.size):
        delta = float(grid[i] - grid[i - 1])
        mean_x = _clip_unit(_step_mean(x, alpha, treat, params, delta))
        if params.tau is None:
            x = mean_x
        else:
            stream = derive_stream(key.child(_SITE_STEP + i))
            x = sample_beta_mean_tau(mean_x, params.tau, stream)
        t = round(float(grid[i]), 9)
        if t in observed:
            ystar[t] = params.scale_max * x
    return ystar


def _draw_initiations(params: ScenarioParams, ystar: dict, key: StreamKey):
    """One-hot initiation indicators at the eligible visits, in time order."""
    n = ystar[0.0].shape[0]
    already = np.zeros(n, dtype=bool)
    sym = {}
    for i, t in enumerate(params.ie_times):
        yt = ystar[round(t, 9)]
        if params.ie_mechanism == "sigmoid":
            p = 1.0 / (1.0 + np.exp(-params.ie_slope * (yt - params.ie_center)))
            u = derive_stream(key.child(_SITE_IE + i)).uniform(size=n)
            start = (~already) & (u < p)
        else:
            observed_now = _round_clip(yt, params)
            start = (~already) & (observed_now > params.ie_threshold)
        sym[t] = start.astype(float)
        already |= start
    return sym


def simulate_patient(params: ScenarioParams, key: StreamKey):
    """One patient's full trajectory; wrapper over the vectorized machinery.

    Returns a dict with treat, y0, alpha, e_sym, the underlying scores at the
    observed grid, initiation indicators and observed scores.
    """
    trial = simulate_trial(replace(params, n=1), key, include_y2_star=True)
    return {
        "treat": int(trial.treat[0]),
        "y0": float(trial.y0[0]),
        "y_obs": {t: float(trial.y_at(t)[0]) for t in params.observed_grid},
        "sym": {t: int(trial.sym_at(t)[0]) for t in params.ie_times},
        "y2_star": float(trial.y2_star[0]),
    }


def simulate_trial(
    params: ScenarioParams, key: StreamKey, include_y2_star: bool = False
) -> TrialData:
    """Simulate one trial of ``params.n`` independent patients.

    The counterfactual end-of-study score is attached only when requested;
    estimators never see it.
    """
    n = params.n
    if n == 0:
        empty = np.empty(0)
        return TrialData(*(empty.copy() for _ in range(9)),
                         y2_star=empty.copy() if include_y2_star else None)
    treat = (derive_stream(key.child(_SITE_TREAT)).uniform(size=n) < params.p_treat).astype(float)
    y0, alpha = sample_truncated_bivariate_normal(
        params.baseline_spec, derive_stream(key.child(_SITE_BASELINE)), size=n
    )
    ystar = _march_chain(params, y0, alpha, treat, key)
    sym = _draw_initiations(params, ystar, key)
    law = params.sym_effect
    e_sym = sample_truncated_normal(
        law.mean, law.sd, law.lo, law.hi, derive_stream(key.child(_SITE_ESYM)), size=n
    )

    # Initiation at a visit affects the *following* measurements only: the
    # decision is made at the visit, so that visit's score is still pre-dose.
    exposed = np.zeros(n)
    y_obs = {}
    for t in params.observed_grid:
        t = round(float(t), 9)
        y_obs[t] = _round_clip(ystar[t] + exposed * e_sym, params)
        if t in sym:
            exposed = np.maximum(exposed, sym[t])

    return TrialData(
        treat=treat,
        y0=y_obs[0.0],
        y05=y_obs[0.5],
        y1=y_obs[1.0],
        y15=y_obs[1.5],
        y2=y_obs[2.0],
        sym05=sym[0.5],
        sym1=sym[1.0],
        sym15=sym[1.5],
        y2_star=_round_clip(ystar[round(params.horizon, 9)], params) if include_y2_star else None,
    )


@dataclass(frozen=True)
class OracleResult:
    theta: float
    se: float
    n: int


def true_value_oracle(
    params: ScenarioParams, n_oracle: int, key: StreamKey, block_size: int = 1_000_000
) -> OracleResult:
    """True direct effect by brute force: regress the unaffected end-of-study
    score on treatment and baseline severity over a huge simulated cohort.

    Streams patients in blocks and accumulates the regression cross-products,
    so memory stays flat. Returns the treatment coefficient and its classical
    standard error (the Monte Carlo uncertainty of the oracle itself).
    """
    if n_oracle < 10_000:
        raise ValueError("oracle needs at least 1e4 patients")
    xtx = np.zeros((3, 3))
    xty = np.zeros(3)
    yty = 0.0
    done = 0
    block_index = 0
    while done < n_oracle:
        m = min(block_size, n_oracle - done)
        block_key = key.child(block_index)
        block = simulate_trial(
            replace(params, n=m, ie_mechanism="sigmoid"), block_key, include_y2_star=True
        )
        X = np.column_stack([np.ones(m), block.treat, block.y0])
        y = block.y2_star
        xtx += X.T @ X
        xty += X.T @ y
        yty += float(y @ y)
        done += m
        block_index += 1
    coefs = np.linalg.solve(xtx, xty)
    rss = yty - 2.0 * coefs @ xty + coefs @ xtx @ coefs
    sigma2 = rss / (n_oracle - 3)
    se = math.sqrt(sigma2 * np.linalg.inv(xtx)[1, 1])
    return OracleResult(theta=float(coefs[1]), se=se, n=n_oracle)


@dataclass(frozen=True)
class CalibrationResult:
    decline_var: float
    tau: float
    achieved_sd: float
    baseline_only_sd: float


def _placebo_sd(params: ScenarioParams, n_mc: int, key: StreamKey) -> float:
    """Monte Carlo SD of the unaffected end-of-study score, placebo law."""
    block = simulate_trial(
        replace(params, n=n_mc, p_treat=0.0, outcome_rounding=False),
        key,
        include_y2_star=True,
    )
    return float(np.std(block.y2_star, ddof=1))


def _with_decline_sd(params: ScenarioParams, sd_alpha: float) -> ScenarioParams:
    """Rescale the decline-rate variance, preserving the baseline correlation."""
    (v_y0, _), _ = params.baseline_cov
    base_cov = np.asarray(params.baseline_cov, dtype=float)
    rho = base_cov[0, 1] / math.sqrt(base_cov[0, 0] * base_cov[1, 1])
    cov = ((v_y0, rho * math.sqrt(v_y0) * sd_alpha),
           (rho * math.sqrt(v_y0) * sd_alpha, sd_alpha**2))
    return replace(params, baseline_cov=cov)


def calibrate(
    target_sd_y2: float,
    decline_share: float,
    params: ScenarioParams,
    key: StreamKey,
    n_mc: int = 200_000,
    rel_tol: float = 0.01,
) -> CalibrationResult:
    """Choose (decline variance, tau) to hit a target SD of the unaffected
    end-of-study score with a given split between decline-rate variability
    and beta-noise variability.

    ``decline_share`` is the share of the non-baseline variance attributed to
    the decline rate: with V0 the variance induced by baseline heterogeneity
    alone, the decline component is set to share * (target^2 - V0) on the
    noise-free chain, and tau is then bisected until the full-chain SD is
    within ``rel_tol`` of the target.
    """
    if not 0.0 < decline_share < 1.0:
        raise ValueError("decline_share must lie in (0, 1)")
    v_target = target_sd_y2**2

    quiet = replace(params, tau=None)
    base_only = _with_decline_sd(quiet, 1e-8)
    sd0 = _placebo_sd(base_only, n_mc, key.child(0))
    v0 = sd0**2
    if v_target <= v0 * 1.02:
        raise CalibrationError(
            f"target SD {target_sd_y2:.3g} is below the baseline-induced floor {sd0:.3g}"
        )
    v_decline_needed = decline_share * (v_target - v0)

    def decline_gap(sd_alpha: float) -> float:
        sd = _placebo_sd(_with_decline_sd(quiet, sd_alpha), n_mc, key.child(0))
        return (sd**2 - v0) - v_decline_needed

    lo_a, hi_a = 1e-4, 0.5
    while decline_gap(hi_a) < 0:
        hi_a *= 2.0
        if hi_a > 64.0:
            raise CalibrationError("decline variance bracket not found")
    for _ in range(60):
        mid = 0.5 * (lo_a + hi_a)
        if decline_gap(mid) < 0:
            lo_a = mid
        else:
            hi_a = mid
        if hi_a - lo_a < 1e-6 * hi_a:
            break
    sd_alpha = 0.5 * (lo_a + hi_a)
    tuned = _with_decline_sd(params, sd_alpha)

    def sd_at_tau(tau: float) -> float:
        return _placebo_sd(replace(tuned, tau=tau), n_mc, key.child(1))

    lo_t, hi_t = 1.0, 1e7
    sd_lo, sd_hi = sd_at_tau(lo_t), sd_at_tau(hi_t)
    if not (sd_hi <= target_sd_y2 <= sd_lo):
        raise CalibrationError(
            f"target SD {target_sd_y2:.4g} unreachable: achievable range "
            f"[{sd_hi:.4g}, {sd_lo:.4g}] over tau in [{lo_t:g}, {hi_t:g}]"
        )
    tau = hi_t
    achieved = sd_hi
    for _ in range(80):
        mid = math.sqrt(lo_t * hi_t)
        sd_mid = sd_at_tau(mid)
        if abs(sd_mid - target_sd_y2) <= rel_tol * target_sd_y2:
            tau, achieved = mid, sd_mid
            break
        if sd_mid > target_sd_y2:
            lo_t = mid
        else:
            hi_t = mid
        tau, achieved = mid, sd_mid
    else:
        raise CalibrationError("tau bisection did not converge")
    return CalibrationResult(
        decline_var=sd_alpha**2, tau=tau, achieved_sd=achieved, baseline_only_sd=sd0
    )
