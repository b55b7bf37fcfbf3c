"""Reference analysis: post-initiation outcomes are set missing and a mixed
model for repeated measures is fitted by REML, with a saturated arm-by-visit
mean structure and one unstructured covariance matrix across visits. The
reported estimate is the arm contrast at the final visit."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from .data import TrialData

_LOG2PI = math.log(2.0 * math.pi)


class EstimabilityError(ValueError):
    """An arm-by-visit cell has no observed data."""


@dataclass
class MmrmFit:
    fixed_effects: np.ndarray  # reference coding, see fit_mmrm
    cell_means: np.ndarray  # (2, k): rows placebo/active, columns visits
    sigma: np.ndarray  # (k, k) across visits
    converged: bool
    reml_loglik: float
    iterations: int
    vcov_cells: np.ndarray  # (2k, 2k) GLS covariance of the cell means
    times: tuple


def set_post_ie_missing(trial: TrialData, mask_at_initiation: bool = True) -> pd.DataFrame:
    """Long records (patient, treat, time, y) with outcomes masked from the
    first initiation visit onward (or strictly after it).

    The initiation visit's own measurement already carries the symptomatic
    effect, so masking starts at that visit by default. Baseline is never
    masked.
    """
    times = (0.0, 0.5, 1.0, 1.5, 2.0)
    first_init = np.full(trial.n, np.inf)
    for t in (1.5, 1.0, 0.5):
        first_init = np.where(trial.sym_at(t) > 0, t, first_init)
    rows = []
    for t in times:
        y = trial.y_at(t).astype(float).copy()
        if t > 0:
            cut = first_init <= t if mask_at_initiation else first_init < t
            y = np.where(cut, np.nan, y)
        rows.append(
            pd.DataFrame(
                {
                    "patient": np.arange(trial.n, dtype=int),
                    "treat": trial.treat.astype(int),
                    "time": t,
                    "y": y,
                }
            )
        )
    return pd.concat(rows, ignore_index=True)


def _pattern_stats(long: pd.DataFrame, include_baseline: bool = False):
    """Group patients by (arm, observed-visit mask); return sufficient stats."""
    post = long if include_baseline else long[long["time"] > 0]
    times = tuple(sorted(post["time"].unique()))
    k = len(times)
    tindex = {t: i for i, t in enumerate(times)}
    wide = post.pivot_table(index="patient", columns="time", values="y", dropna=False)
    wide = wide.reindex(columns=times)
    arm = post.groupby("patient")["treat"].first().reindex(wide.index)
    Y = wide.to_numpy()
    obs = ~np.isnan(Y)

    groups = []
    keys = [(int(a), tuple(o.tolist())) for a, o in zip(arm.to_numpy(), obs)]
    order = {}
    for i, key in enumerate(keys):
        order.setdefault(key, []).append(i)
    for (a, mask), idx in order.items():
        midx = np.nonzero(np.array(mask))[0]
        if midx.size == 0:
            continue
        block = Y[np.ix_(idx, midx)]
        m = block.mean(axis=0)
        centered = block - m
        groups.append(
            dict(arm=a, obs=midx, n=len(idx), mean=m, sscp=centered.T @ centered)
        )
    counts = np.zeros((2, k))
    for g in groups:
        counts[g["arm"], g["obs"]] += g["n"]
    return times, tindex, groups, counts


def _chol_from_theta(theta: np.ndarray, k: int) -> np.ndarray:
    L = np.zeros((k, k))
    L[np.diag_indices(k)] = np.exp(theta[:k])
    L[np.tril_indices(k, -1)] = theta[k:]
    return L


def _theta_from_sigma(sigma: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(sigma)
    k = sigma.shape[0]
    return np.concatenate([np.log(np.diag(L)), L[np.tril_indices(k, -1)]])


def _reml_parts(theta: np.ndarray, k: int, groups, want_grad: bool = False):
    """Pieces of the observed-data REML criterion at one covariance value.

    With ``want_grad`` also returns the gradient of the negative restricted
    log-likelihood with respect to theta; the profiled GLS means contribute
    nothing by the envelope theorem.
    """
    L = _chol_from_theta(theta, k)
    sigma = L @ L.T
    A = np.zeros((2 * k, 2 * k))
    b = np.zeros(2 * k)
    logdet_sum = 0.0
    cache = {}
    for g in groups:
        key = tuple(g["obs"].tolist())
        if key not in cache:
            sub = sigma[np.ix_(g["obs"], g["obs"])]
            cho = np.linalg.cholesky(sub)
            inv = np.linalg.inv(sub)
            cache[key] = (inv, 2.0 * np.log(np.diag(cho)).sum())
        inv, logdet = cache[key]
        cols = g["arm"] * k + g["obs"]
        A[np.ix_(cols, cols)] += g["n"] * inv
        b[cols] += g["n"] * (inv @ g["mean"])
        logdet_sum += g["n"] * logdet
    beta = np.linalg.solve(A, b)
    quad = 0.0
    grad = None
    ainv = np.linalg.inv(A) if want_grad else None
    gfull = np.zeros((k, k)) if want_grad else None
    for g in groups:
        inv, _ = cache[tuple(g["obs"].tolist())]
        cols = g["arm"] * k + g["obs"]
        mu = beta[cols]
        d = g["mean"] - mu
        quad += float(np.sum(inv * g["sscp"])) + g["n"] * float(d @ inv @ d)
        if want_grad:
            v = ainv[np.ix_(cols, cols)]
            md = inv @ d
            inner = (
                g["n"] * inv
                - inv @ g["sscp"] @ inv
                - g["n"] * np.outer(md, md)
                - g["n"] * inv @ v @ inv
            )
            gfull[np.ix_(g["obs"], g["obs"])] += inner
    sign, logdet_a = np.linalg.slogdet(A)
    if want_grad:
        # d(-2 rll) = tr(gfull dSigma); Sigma = L L' contributes dL twice.
        gl = 2.0 * gfull @ L
        grad = np.concatenate(
            [np.diag(gl) * np.diag(L), gl[np.tril_indices(k, -1)]]
        )
    return sigma, beta, A, logdet_sum, logdet_a, quad, grad


def reml_loglik(theta: np.ndarray, k: int, groups, n_obs: int) -> float:
    """Restricted log-likelihood with profiled-out saturated means."""
    try:
        _, _, _, logdet_sum, logdet_a, quad, _ = _reml_parts(theta, k, groups)
    except np.linalg.LinAlgError:
        return -1e12
    q = 2 * k
    return -0.5 * ((n_obs - q) * _LOG2PI + logdet_sum + logdet_a + quad)


def _start_sigma(long: pd.DataFrame, times) -> np.ndarray:
    post = long[long["time"] > 0]
    wide = post.pivot_table(index="patient", columns="time", values="y", dropna=False)
    wide = wide.reindex(columns=list(times))
    Y = wide.to_numpy()
    k = len(times)
    sig = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            both = ~np.isnan(Y[:, i]) & ~np.isnan(Y[:, j])
            if both.sum() > 2:
                c = np.cov(Y[both, i], Y[both, j])[0, 1] if i != j else np.var(Y[both, i], ddof=1)
            else:
                c = 0.0 if i != j else 1.0
            sig[i, j] = sig[j, i] = c
    w, v = np.linalg.eigh(sig)
    floor = max(1e-3 * np.mean(np.diag(sig)), 1e-3)
    w = np.clip(w, floor, None)
    return v @ np.diag(w) @ v.T


def fit_mmrm(
    long: pd.DataFrame,
    rel_tol: float = 1e-9,
    max_iter: int = 200,
    include_baseline: bool = False,
) -> MmrmFit:
    """REML fit of the repeated-measures model on long-format data.

    Mean structure: one free mean per arm-by-visit cell (treatment, visit and
    their interaction, i.e. saturated). ``fixed_effects`` reports the
    reference coding [intercept at (placebo, first visit), arm, visit main
    effects, arm-by-visit interactions]. Covariance: one unstructured matrix
    across visits, optimized over its Cholesky factor (log diagonal, free
    off-diagonal), fixed effects recomputed by GLS at the final value.
    With ``include_baseline`` the baseline measurement joins the response
    vector as an extra visit level.
    """
    times, tindex, groups, counts = _pattern_stats(long, include_baseline)
    k = len(times)
    if (counts <= 0).any():
        a, t = np.argwhere(counts <= 0)[0]
        raise EstimabilityError(
            f"no observed outcomes in arm {a} at time {times[t]}"
        )
    n_obs = int(sum(g["n"] * g["obs"].size for g in groups))
    theta0 = _theta_from_sigma(_start_sigma(long, times))
    q = 2 * k

    def objective(theta):
        try:
            _, _, _, logdet_sum, logdet_a, quad, grad = _reml_parts(
                theta, k, groups, want_grad=True
            )
        except np.linalg.LinAlgError:
            return 1e12, np.zeros_like(theta)
        f = 0.5 * ((n_obs - q) * _LOG2PI + logdet_sum + logdet_a + quad)
        return f, 0.5 * grad

    res = minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options=dict(maxiter=max_iter, ftol=rel_tol, gtol=1e-8),
    )
    # Newton polish on the analytic gradient: the quasi-Newton loop stops at
    # the float resolution of the criterion, which is too loose for the
    # saturated-model identities; a few Newton steps push the gradient to
    # ~1e-9 at negligible cost.
    theta = res.x
    grad = objective(theta)[1]
    polish_iters = 0
    for _ in range(8):
        gnorm = np.abs(grad).max()
        if gnorm < 1e-9 * (1.0 + abs(res.fun)):
            break
        h = np.zeros((theta.size, theta.size))
        step = 1e-5
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = step
            h[:, i] = (objective(theta + e)[1] - objective(theta - e)[1]) / (2 * step)
        h = 0.5 * (h + h.T)
        w = np.linalg.eigvalsh(h)
        if w[0] <= 0:
            h += (abs(w[0]) + 1e-8) * np.eye(theta.size)
        delta = np.linalg.solve(h, -grad)
        scale = 1.0
        for _ in range(10):
            g_try = objective(theta + scale * delta)[1]
            if np.abs(g_try).max() < gnorm:
                theta = theta + scale * delta
                grad = g_try
                break
            scale *= 0.5
        else:
            break
        polish_iters += 1
    sigma, beta, A, *_ = _reml_parts(theta, k, groups)
    vcov = np.linalg.inv(A)
    cell = beta.reshape(2, k)
    fixed = np.concatenate(
        [
            [cell[0, 0]],
            [cell[1, 0] - cell[0, 0]],
            cell[0, 1:] - cell[0, 0],
            (cell[1, 1:] - cell[0, 1:]) - (cell[1, 0] - cell[0, 0]),
        ]
    )
    final_ll = reml_loglik(theta, k, groups, n_obs)
    gnorm = np.abs(grad).max() / (1.0 + abs(final_ll))
    return MmrmFit(
        fixed_effects=fixed,
        cell_means=cell,
        sigma=sigma,
        converged=bool(res.success or gnorm < 1e-6),
        reml_loglik=float(final_ll),
        iterations=int(res.nit) + polish_iters,
        vcov_cells=vcov,
        times=times,
    )


def mmrm_contrast_t2(fit: MmrmFit, change_from_baseline: bool = False):
    """Active-minus-placebo mean difference at the final visit, with its GLS
    standard error. With randomized arms and no baseline level in the model
    this already estimates the arm difference in change from baseline; with
    ``change_from_baseline`` the baseline level's arm difference is
    subtracted explicitly (difference in differences)."""
    k = len(fit.times)
    c = np.zeros(2 * k)
    c[k + (k - 1)] = 1.0
    c[k - 1] = -1.0
    if change_from_baseline:
        if fit.times[0] != 0.0:
            raise ValueError("model has no baseline level")
        c[k] -= 1.0
        c[0] += 1.0
    theta = float(c @ np.concatenate([fit.cell_means[0], fit.cell_means[1]]))
    se = float(np.sqrt(c @ fit.vcov_cells @ c))
    return theta, se


@dataclass
class MmrmDiagnostics:
    converged: bool
    iterations: int
    reml_loglik: float


class MmrmEstimator:
    """fit/get_params-style wrapper producing the final-visit contrast."""

    method = "mmrm"

    def __init__(self, mask_at_initiation: bool = True):
        self.mask_at_initiation = mask_at_initiation

    def get_params(self, deep=True):
        return dict(mask_at_initiation=self.mask_at_initiation)

    def set_params(self, **params):
        for key, value in params.items():
            if not hasattr(self, key):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, trial: TrialData):
        long = set_post_ie_missing(trial, self.mask_at_initiation)
        self.fit_ = fit_mmrm(long)
        self.theta_, self.se_model_ = mmrm_contrast_t2(self.fit_)
        return self

    def result(self):
        from .gest import EstimateResult

        return EstimateResult(
            method="mmrm",
            theta_hat=self.theta_,
            model_se=self.se_model_,
            trace=MmrmDiagnostics(
                converged=self.fit_.converged,
                iterations=self.fit_.iterations,
                reml_loglik=self.fit_.reml_loglik,
            ),
        )


def estimate_mmrm(trial: TrialData, mask_at_initiation: bool = True):
    """One-call MMRM estimate on a trial."""
    return MmrmEstimator(mask_at_initiation=mask_at_initiation).fit(trial).result()
