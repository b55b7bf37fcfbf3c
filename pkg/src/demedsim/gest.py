"""Sequential de-mediation estimators of the controlled direct effect of
treatment on the end-of-study score with symptomatic-medication initiation
held at zero.

Four variants are provided under stable method ids:

* ``established`` - backward de-mediation, one mediator coefficient per visit;
* ``mod1`` - each initiation's effect estimated on the next visit's score,
  pooled across visits, de-mediated concurrently;
* ``mod2`` - the backward-pass coefficients pooled before de-mediation;
* ``mod3`` - the backward pass repeated, pooling each visit's coefficient
  with the previous sweep's other-visit coefficients until the treatment
  estimate stabilises.

Everything is implemented over stacked datasets (leading batch axis), so the
same code evaluates one trial, a bootstrap batch, or a jackknife batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TrialData, validate_trial
from .regress import SingularDesignError, _ols_batched, _probit_batched, ols

IE_TIMES = (0.5, 1.0, 1.5)
G_METHODS = ("established", "mod1", "mod2", "mod3")


@dataclass
class DemediationTrace:
    """Per-visit mediator coefficients and the pooling/iteration diagnostics."""

    coef_sym: dict = field(default_factory=dict)
    se_sym: dict = field(default_factory=dict)
    beta_sym: float | None = None
    iterations: int | None = None
    converged: bool | None = None


@dataclass
class EstimateResult:
    method: str
    theta_hat: float
    model_se: float
    trace: object


def weighted_average(coefs, ses, weighting: str = "inverse-se") -> float:
    """Average coefficients with weights 1/SE (default) or 1/SE^2."""
    coefs = np.asarray(coefs, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if coefs.shape != ses.shape or coefs.size < 1:
        raise ValueError("need equally many coefficients and standard errors")
    if np.any(ses <= 0):
        raise ValueError("standard errors must be positive")
    w = 1.0 / ses if weighting == "inverse-se" else 1.0 / ses**2
    return float(np.sum(coefs * w) / np.sum(w))


# ---------------------------------------------------------------------------
# Batched machinery
# ---------------------------------------------------------------------------


class _Batch:
    """Stacked analysis datasets: every field is (B, n)."""

    FIELDS = ("z", "y0", "y05", "y1", "y15", "y2", "s05", "s1", "s15")

    def __init__(self, **arrays):
        for f in self.FIELDS:
            setattr(self, f, arrays[f])
        self.B, self.n = self.z.shape
        self.ones = np.ones_like(self.z)

    @classmethod
    def from_trial(cls, trial: TrialData, indices: np.ndarray | None = None) -> "_Batch":
        cols = dict(
            z=trial.treat, y0=trial.y0, y05=trial.y05, y1=trial.y1,
            y15=trial.y15, y2=trial.y2, s05=trial.sym05, s1=trial.sym1, s15=trial.sym15,
        )
        if indices is None:
            return cls(**{k: v[None, :].astype(float) for k, v in cols.items()})
        return cls(**{k: v[indices].astype(float) for k, v in cols.items()})

    def take(self, rows: np.ndarray) -> "_Batch":
        return _Batch(**{f: getattr(self, f)[rows] for f in self.FIELDS})

    def sym(self, t: float) -> np.ndarray:
        return {0.5: self.s05, 1.0: self.s1, 1.5: self.s15}[t]

    def y_lag(self, t: float) -> np.ndarray:
        return {0.5: self.y05, 1.0: self.y1, 1.5: self.y15}[t]


def _stack(cols) -> np.ndarray:
    return np.stack(cols, axis=2)


def _wavg_masked(coefs, ses, weighting: str):
    """Pool (K, B) coefficient stacks, skipping unavailable entries (nan)."""
    coefs = np.asarray(coefs, dtype=float)
    ses = np.asarray(ses, dtype=float)
    avail = np.isfinite(coefs) & np.isfinite(ses) & (ses > 0)
    w = np.where(avail, 1.0 / np.where(ses > 0, ses, 1.0), 0.0)
    if weighting == "inverse-variance":
        w = w**2
    denom = w.sum(axis=0)
    num = np.where(avail, coefs * w, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), np.nan)


class _PatternKernel:
    """All estimator passes for a sub-batch sharing one initiation pattern.

    ``present[t]`` says whether visit t has any initiations in every member
    of the sub-batch; absent visits contribute no propensity model, no
    mediator fit and no de-mediation (their coefficient is excluded from all
    pooling), which is the only identified behaviour for an all-zero
    indicator.
    """

    def __init__(self, b: _Batch, present: dict, options: dict, preset_probits=None):
        self.b = b
        self.present = present
        self.opt = options
        self.ok = np.ones(b.B, dtype=bool)
        # Constant-one initiation columns are unusable (collinear with the
        # intercept in every outcome model).
        for t in IE_TIMES:
            if present[t]:
                self.ok &= b.sym(t).sum(axis=1) < b.n
        self._p_est = dict(preset_probits) if preset_probits else {}
        self._p15_mod1 = None

    # -- propensity models ---------------------------------------------------

    def _probit(self, cols, ysym):
        prob, _, ok = _probit_batched(_stack(cols), ysym)
        self.ok &= ok
        return prob

    def p_established(self, t: float) -> np.ndarray:
        """Initiation propensity given earlier indicators and the current score."""
        if t in self._p_est:
            return self._p_est[t]
        b = self.b
        if t == 1.5:
            cols = [b.ones] + [b.sym(s) for s in (1.0, 0.5) if self.present[s]] + [b.y15]
        elif t == 1.0:
            cols = [b.ones] + ([b.s05] if self.present[0.5] else []) + [b.y1]
        else:
            cols = [b.ones, b.y05]
        prob = self._probit(cols, b.sym(t))
        self._p_est[t] = prob
        return prob

    def p15_next_visit(self) -> np.ndarray:
        """Propensity for the last initiation visit, earliest indicator omitted."""
        if self._p15_mod1 is None:
            b = self.b
            cols = [b.ones, b.y15] + ([b.s1] if self.present[1.0] else [])
            self._p15_mod1 = self._probit(cols, b.s15)
        return self._p15_mod1

    # -- linear fits -----------------------------------------------------------

    @staticmethod
    def _ols_drop_retry(cols, y, weights=None):
        """Fit with the propensity column last; members where it is exactly
        aliased (complete separation makes it duplicate an indicator) are
        refitted without it, mirroring pivoted column dropping."""
        coefs, ses, ok = _ols_batched(_stack(cols), y, weights=weights)
        if not ok.all():
            bad = np.nonzero(~ok)[0]
            x2 = _stack([c[bad] for c in cols[:-1]])
            c2, s2, ok2 = _ols_batched(
                x2, y[bad], weights=None if weights is None else weights[bad]
            )
            coefs[bad, : len(cols) - 1] = c2
            ses[bad, : len(cols) - 1] = s2
            ok[bad] = ok2
        return coefs, ses, ok

    def _ols(self, cols, y, sym_index=None, weights=None, drop_last=False):
        if drop_last:
            coefs, ses, ok = self._ols_drop_retry(cols, y, weights)
        else:
            coefs, ses, ok = _ols_batched(_stack(cols), y, weights=weights)
        self.ok &= ok
        if sym_index is None:
            return coefs[:, 1], ses[:, 1]  # treatment coefficient
        return coefs[:, sym_index], ses[:, sym_index]

    def _demediation_fit(self, t: float, response: np.ndarray):
        """Mediator-coefficient fit at visit t against the running residual."""
        b = self.b
        cols = [b.ones, b.z, b.y_lag(t), b.sym(t)]
        for s in sorted((s for s in IE_TIMES if s < t and self.present[s]), reverse=True):
            cols.append(b.sym(s))
        cols.append(self.p_established(t))
        return self._ols(cols, response, sym_index=3, drop_last=True)

    def final_fit(self, response: np.ndarray):
        b = self.b
        return self._ols([b.ones, b.z, b.y0], response)

    # -- passes ----------------------------------------------------------------

    def backward_pass(self):
        """One backward sweep de-mediating each visit with its own coefficient.
        Returns coefficient and SE stacks plus the final treatment fit."""
        b = self.b
        coefs, ses = {}, {}
        R = b.y2
        for t in (1.5, 1.0, 0.5):
            if not self.present[t]:
                coefs[t] = np.full(b.B, np.nan)
                ses[t] = np.full(b.B, np.nan)
                continue
            coefs[t], ses[t] = self._demediation_fit(t, R)
            R = R - coefs[t][:, None] * b.sym(t)
        theta, se = self.final_fit(R)
        return coefs, ses, theta, se

    def run(self, methods):
        out = {}
        need_backward = {"established", "mod2", "mod3"} & set(methods)
        if need_backward:
            coefs, ses, theta, se = self.backward_pass()
            if "established" in methods:
                out["established"] = dict(theta=theta, se=se, coef=coefs, sevisit=ses)
            if "mod2" in methods:
                out["mod2"] = self._pooled_from(coefs, ses)
            if "mod3" in methods:
                out["mod3"] = self._iterative(coefs, ses, theta)
        if "mod1" in methods:
            out["mod1"] = self._next_visit()
        for m in out.values():
            m["ok"] = self.ok.copy()
        return out

    def _pooled_from(self, coefs, ses):
        b = self.b
        beta = _wavg_masked(
            [coefs[t] for t in IE_TIMES], [ses[t] for t in IE_TIMES], self.opt["weighting"]
        )
        sym_sum = b.s05 + b.s1 + b.s15
        shift = np.where(np.isfinite(beta), beta, 0.0)
        R = b.y2 - shift[:, None] * sym_sum
        theta, se = self.final_fit(R)
        return dict(theta=theta, se=se, coef=coefs, sevisit=ses, beta=beta)

    def _next_visit(self):
        """Each initiation's effect on the following visit's score, pooled."""
        b = self.b
        coefs = {t: np.full(b.B, np.nan) for t in IE_TIMES}
        ses = {t: np.full(b.B, np.nan) for t in IE_TIMES}
        if self.present[0.5]:
            cols = [b.ones, b.z, b.y05, b.s05, self.p_established(0.5)]
            coefs[0.5], ses[0.5] = self._ols(cols, b.y1, sym_index=3, drop_last=True)
        if self.present[1.0]:
            # Restricted to patients without the earlier initiation; the
            # earlier indicator is identically zero there and is dropped.
            keep = 1.0 - b.s05
            usable = (b.s1 * keep).sum(axis=1) > 0
            cols = [b.ones, b.z, b.y1, b.s1, self.p_established(1.0)]
            cf, sf, okf = self._ols_drop_retry(cols, b.y15, weights=keep)
            # No initiators left in the subset is a skip, not a failure.
            self.ok &= okf | ~usable
            coefs[1.0] = np.where(usable, cf[:, 3], np.nan)
            ses[1.0] = np.where(usable, sf[:, 3], np.nan)
        if self.present[1.5]:
            if self.opt.get("mod1_restrict_late", False):
                keep = (1.0 - b.s05) * (1.0 - b.s1)
                usable = (b.s15 * keep).sum(axis=1) > 0
                cols = [b.ones, b.z, b.y15, b.s15, self.p15_next_visit()]
                cf, sf, okf = self._ols_drop_retry(cols, b.y2, weights=keep)
                self.ok &= okf | ~usable
                coefs[1.5] = np.where(usable, cf[:, 3], np.nan)
                ses[1.5] = np.where(usable, sf[:, 3], np.nan)
            else:
                cols = [b.ones, b.z, b.y15, b.s15]
                if self.present[1.0]:
                    cols.append(b.s1)
                cols.append(self.p15_next_visit())
                coefs[1.5], ses[1.5] = self._ols(cols, b.y2, sym_index=3, drop_last=True)
        return self._pooled_from(coefs, ses)

    def _iterative(self, coefs1, ses1, theta1):
        """Repeat the backward sweep, pooling each visit's fresh coefficient
        with the previous sweep's coefficients at the other visits."""
        b = self.b
        tol = self.opt["mod3_tol"]
        max_iter = self.opt["mod3_max_iter"]
        weighting = self.opt["weighting"]
        reuse = (coefs1[1.5], ses1[1.5]) if self.present[1.5] else None

        theta_prev = theta1.copy()
        c_prev = {t: coefs1[t].copy() for t in IE_TIMES}
        s_prev = {t: ses1[t].copy() for t in IE_TIMES}
        theta_out = theta1.copy()
        se_out = np.full(b.B, np.nan)
        iters = np.full(b.B, 1, dtype=int)
        conv = np.zeros(b.B, dtype=bool)
        active = np.arange(b.B)
        kern = self
        j = 1
        while active.size and j < max_iter:
            j += 1
            cp = {t: c_prev[t][active] for t in IE_TIMES}
            sp = {t: s_prev[t][active] for t in IE_TIMES}
            if active.size == b.B:
                sub = kern
            else:
                # Propensities depend on the data only, never on the running
                # residual, so sweeps reuse them instead of refitting.
                preset = {t: p[active] for t, p in self._p_est.items()}
                sub = _PatternKernel(b.take(active), self.present, self.opt, preset)
                sub.ok = self.ok[active].copy()
            r15 = None
            if self.present[1.5]:
                r15 = (reuse[0][active], reuse[1][active]) if active.size != b.B else reuse

            pooled = {}
            R = sub.b.y2
            c_new = {t: np.full(active.size, np.nan) for t in IE_TIMES}
            s_new = {t: np.full(active.size, np.nan) for t in IE_TIMES}
            for t in (1.5, 1.0, 0.5):
                if not self.present[t]:
                    continue
                if t == 1.5 and r15 is not None:
                    c_new[t], s_new[t] = r15
                else:
                    c_new[t], s_new[t] = sub._demediation_fit(t, R)
                others = [s for s in IE_TIMES if s != t]
                pooled[t] = _wavg_masked(
                    [c_new[t]] + [cp[s] for s in others],
                    [s_new[t]] + [sp[s] for s in others],
                    weighting,
                )
                R = R - pooled[t][:, None] * sub.b.sym(t)
            theta_j, se_j = sub.final_fit(R)
            self.ok[active] &= sub.ok

            theta_out[active] = theta_j
            se_out[active] = se_j
            iters[active] = j
            done = np.abs(theta_j - theta_prev[active]) < tol
            conv[active[done]] = True
            for t in IE_TIMES:
                c_prev[t][active] = c_new[t]
                s_prev[t][active] = s_new[t]
            theta_prev[active] = theta_j
            active = active[~done]

        # A sweep that never ran (no initiations anywhere) reuses the
        # initial pass's final fit for its standard error.
        if np.isnan(se_out).any():
            _, _, _, se1 = self.backward_pass()
            se_out = np.where(np.isnan(se_out), se1, se_out)
        return dict(
            theta=theta_out, se=se_out, coef=c_prev, sevisit=s_prev,
            iterations=iters, converged=conv,
        )


_DEFAULT_OPTIONS = dict(
    weighting="inverse-se",
    mod3_tol=1e-4,
    mod3_max_iter=25,
    mod1_restrict_late=False,
)


def evaluate_methods(batch: _Batch, methods, options: dict | None = None) -> dict:
    """Run the requested estimators over a stacked batch.

    Returns per method: theta (B,), se (B,), ok (B,) plus per-visit
    coefficient stacks and, for the iterative method, iteration counts.
    Members are grouped by which visits have any initiations so that absent
    indicators are dropped from every design without ragged arrays.
    """
    opts = dict(_DEFAULT_OPTIONS)
    if options:
        opts.update(options)
    methods = tuple(methods)
    B = batch.B
    pres_code = (
        (batch.s05.sum(axis=1) > 0).astype(int)
        + 2 * (batch.s1.sum(axis=1) > 0).astype(int)
        + 4 * (batch.s15.sum(axis=1) > 0).astype(int)
    )
    out = {
        m: dict(
            theta=np.full(B, np.nan), se=np.full(B, np.nan), ok=np.zeros(B, dtype=bool),
            coef={t: np.full(B, np.nan) for t in IE_TIMES},
            sevisit={t: np.full(B, np.nan) for t in IE_TIMES},
            beta=np.full(B, np.nan),
            iterations=np.zeros(B, dtype=int),
            converged=np.zeros(B, dtype=bool),
        )
        for m in methods
    }
    for code in np.unique(pres_code):
        rows = np.nonzero(pres_code == code)[0]
        sub = batch if rows.size == B else batch.take(rows)
        present = {0.5: bool(code & 1), 1.0: bool(code & 2), 1.5: bool(code & 4)}
        kern = _PatternKernel(sub, present, opts)
        res = kern.run(methods)
        for m in methods:
            r = res[m]
            out[m]["theta"][rows] = r["theta"]
            out[m]["se"][rows] = r["se"]
            out[m]["ok"][rows] = r["ok"]
            for t in IE_TIMES:
                out[m]["coef"][t][rows] = r["coef"][t]
                out[m]["sevisit"][t][rows] = r["sevisit"][t]
            if "beta" in r:
                out[m]["beta"][rows] = r["beta"]
            if "iterations" in r:
                out[m]["iterations"][rows] = r["iterations"]
                out[m]["converged"][rows] = r["converged"]
            elif m != "mod3":
                out[m]["converged"][rows] = True
    return out


# ---------------------------------------------------------------------------
# Single-trial API
# ---------------------------------------------------------------------------


def _single(trial: TrialData, method: str, **options) -> EstimateResult:
    validate_trial(trial)
    batch = _Batch.from_trial(trial)
    res = evaluate_methods(batch, (method,), options)[method]
    if not res["ok"][0]:
        raise SingularDesignError(
            f"{method}: degenerate design (collinear columns or constant indicator)"
        )
    coef = {t: res["coef"][t][0] for t in IE_TIMES}
    ses = {t: res["sevisit"][t][0] for t in IE_TIMES}
    trace = DemediationTrace(
        coef_sym={t: (0.0 if math.isnan(coef[t]) else float(coef[t])) for t in IE_TIMES},
        se_sym={t: (math.inf if math.isnan(ses[t]) else float(ses[t])) for t in IE_TIMES},
        beta_sym=float(res["beta"][0]) if method in ("mod1", "mod2", "mod3") and np.isfinite(res["beta"][0]) else None,
        iterations=int(res["iterations"][0]) if method == "mod3" else None,
        converged=bool(res["converged"][0]) if method == "mod3" else None,
    )
    return EstimateResult(
        method=method,
        theta_hat=float(res["theta"][0]),
        model_se=float(res["se"][0]),
        trace=trace,
    )


def estimate_established(trial: TrialData, **options) -> EstimateResult:
    return _single(trial, "established", **options)


def estimate_mod1(trial: TrialData, **options) -> EstimateResult:
    return _single(trial, "mod1", **options)


def estimate_mod2(trial: TrialData, **options) -> EstimateResult:
    return _single(trial, "mod2", **options)


def estimate_mod3(trial: TrialData, tol: float = 1e-4, max_iter: int = 25, **options) -> EstimateResult:
    return _single(trial, "mod3", mod3_tol=tol, mod3_max_iter=max_iter, **options)


class _BaseGEstimator:
    """fit/get_params-style wrapper over one de-mediation method."""

    method = ""

    def __init__(self, weighting="inverse-se", mod1_restrict_late=False,
                 mod3_tol=1e-4, mod3_max_iter=25):
        self.weighting = weighting
        self.mod1_restrict_late = mod1_restrict_late
        self.mod3_tol = mod3_tol
        self.mod3_max_iter = mod3_max_iter

    def get_params(self, deep=True):
        return dict(
            weighting=self.weighting,
            mod1_restrict_late=self.mod1_restrict_late,
            mod3_tol=self.mod3_tol,
            mod3_max_iter=self.mod3_max_iter,
        )

    def set_params(self, **params):
        for k, v in params.items():
            if not hasattr(self, k):
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def fit(self, trial: TrialData):
        res = _single(trial, self.method, **self.get_params())
        self.result_ = res
        self.theta_ = res.theta_hat
        self.se_model_ = res.model_se
        self.trace_ = res.trace
        return self

    def result(self) -> EstimateResult:
        if not hasattr(self, "result_"):
            raise RuntimeError("estimator is not fitted")
        return self.result_


class EstablishedGEstimator(_BaseGEstimator):
    method = "established"


class AveragedProximalGEstimator(_BaseGEstimator):
    method = "mod1"


class AveragedOutcomeGEstimator(_BaseGEstimator):
    method = "mod2"


class IterativeAveragedGEstimator(_BaseGEstimator):
    method = "mod3"


ESTIMATORS = {
    "established": EstablishedGEstimator,
    "mod1": AveragedProximalGEstimator,
    "mod2": AveragedOutcomeGEstimator,
    "mod3": IterativeAveragedGEstimator,
}


def ols_benchmark(trial: TrialData) -> EstimateResult:
    """Infeasible-in-practice comparator: OLS of the unaffected end-of-study
    score on treatment and baseline. Requires the counterfactual channel."""
    if trial.y2_star is None:
        raise ValueError("benchmark needs the counterfactual channel (y2_star)")
    X = np.column_stack([np.ones(trial.n), trial.treat, trial.y0])
    fit = ols(X, trial.y2_star, names=("intercept", "treat", "y0"))
    return EstimateResult(
        method="benchmark",
        theta_hat=float(fit.coefs[1]),
        model_se=float(fit.ses[1]),
        trace=DemediationTrace(),
    )
