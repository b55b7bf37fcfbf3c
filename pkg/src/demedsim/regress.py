"""Small-dimension regression kernels: OLS with classical standard errors and
probit maximum likelihood.

The public functions operate on one design matrix. The underscore-prefixed
batched variants evaluate many datasets of identical layout at once (stacked
along a leading axis) and are what the resampling machinery calls; they agree
with the public functions to numerical precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri


class SingularDesignError(ValueError):
    """Design matrix is rank deficient; names the offending column."""


@dataclass
class LinearFit:
    coefs: np.ndarray
    ses: np.ndarray
    sigma2: float
    df: int
    xtx_inv: np.ndarray


@dataclass
class ProbitFit:
    coefs: np.ndarray
    converged: bool
    iterations: int
    loglik: float


def _column_name(names, j):
    return names[j] if names is not None else f"column {j}"


def ols(design: np.ndarray, y: np.ndarray, names=None) -> LinearFit:
    """Least squares with classical (homoskedastic) standard errors.

    QR-based; a near-zero diagonal of R flags the first column that is
    linearly dependent on the preceding ones. Delegates to the batched
    kernel so single and stacked evaluations are bitwise identical.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p:
        raise ValueError(f"need more rows ({n}) than columns ({p})")
    coefs, ses, ok, sigma2, xtx_inv = _ols_batched(
        X[None], y[None], full_output=True
    )
    if not ok[0]:
        _, r = np.linalg.qr(X)
        diag = np.abs(np.diag(r))
        tol = 1e-10 * max(np.linalg.norm(X), 1.0)
        bad = np.nonzero(diag < tol)[0]
        j = bad[0] if bad.size else int(np.argmin(diag))
        raise SingularDesignError(
            f"design is rank deficient at {_column_name(names, j)}"
        )
    return LinearFit(
        coefs=coefs[0], ses=ses[0], sigma2=float(sigma2[0]), df=n - p, xtx_inv=xtx_inv[0]
    )


_ETA_CLIP = 38.0  # ndtr underflows to 0/1 just beyond this
_P_FLOOR = 1e-300


def _probit_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.where(y > 0, log_ndtr(eta), log_ndtr(-eta))))


def probit_fit(
    design: np.ndarray,
    y: np.ndarray,
    max_iter: int = 100,
    rel_tol: float = 1e-10,
) -> ProbitFit:
    """Probit MLE by Fisher scoring.

    Stops when the relative log-likelihood change falls below ``rel_tol``;
    complete or quasi-separation keeps the likelihood improving without a
    finite optimum and is reported as ``converged=False`` with coefficients
    from the final iteration. Delegates to the batched engine.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p:
        raise ValueError(f"need more rows ({n}) than columns ({p})")
    if y.min() == y.max():
        raise ValueError("response contains a single class")
    _, converged, ok, beta, ll, iters = _probit_batched(
        X[None], y[None], max_iter=max_iter, rel_tol=rel_tol, full_output=True
    )
    if not ok[0]:
        raise ValueError("probit design is degenerate")
    return ProbitFit(
        coefs=beta[0], converged=bool(converged[0]), iterations=int(iters[0]),
        loglik=float(ll[0]),
    )


def predict_probit(fit: ProbitFit, design: np.ndarray) -> np.ndarray:
    """Fitted probabilities Phi(X b), kept strictly inside (0, 1)."""
    X = np.asarray(design, dtype=float)
    if X.shape[1] != fit.coefs.shape[0]:
        raise ValueError("design width does not match the fit")
    return np.clip(ndtr(X @ fit.coefs), _P_FLOOR, 1.0 - 1e-16)


# ---------------------------------------------------------------------------
# Batched kernels. Designs are stacked (B, n, p); responses (B, n). Weights,
# when given, are 0/1 row masks implementing subset fits without ragged
# arrays. Each returns per-batch validity flags instead of raising, so a
# single degenerate bootstrap replicate cannot abort a whole batch.
# ---------------------------------------------------------------------------


def _ols_batched(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    full_output: bool = False,
):
    """Batched least squares. Returns (coefs, ses, ok).

    With weights (0/1) the fit, residual variance and classical SEs match an
    OLS on the kept rows exactly. Rank-deficient members get ok=False.
    """
    B, n, p = X.shape
    if weights is not None:
        sw = np.sqrt(weights)
        Xw = X * sw[:, :, None]
        yw = y * sw
        nobs = weights.sum(axis=1)
    else:
        Xw, yw = X, y
        nobs = np.full(B, n, dtype=float)
    q, r = np.linalg.qr(Xw)
    diag = np.abs(np.einsum("bii->bi", r))
    scale = np.maximum(np.sqrt(np.einsum("bnp,bnp->b", Xw, Xw)), 1.0)
    ok = (diag > 1e-10 * scale[:, None]).all(axis=1) & (nobs > p)
    # Patch singular members with the identity so the solve stays defined;
    # their outputs are discarded via ok.
    r_safe = np.where(ok[:, None, None], r, np.eye(p))
    qty = np.einsum("bnp,bn->bp", q, yw)
    coefs = np.linalg.solve(r_safe, qty[..., None])[..., 0]
    resid = yw - np.einsum("bnp,bp->bn", Xw, coefs)
    rss = np.einsum("bn,bn->b", resid, resid)
    df = np.maximum(nobs - p, 1.0)
    sigma2 = rss / df
    r_inv = np.linalg.inv(r_safe)
    xtx_inv_diag = np.einsum("bij,bij->bi", r_inv, r_inv)
    ses = np.sqrt(np.clip(sigma2[:, None] * xtx_inv_diag, 0.0, None))
    if full_output:
        xtx_inv = np.einsum("bik,bjk->bij", r_inv, r_inv)
        return coefs, ses, ok, sigma2, xtx_inv
    return coefs, ses, ok


def _probit_batched(
    X: np.ndarray,
    y: np.ndarray,
    max_iter: int = 100,
    rel_tol: float = 1e-10,
    full_output: bool = False,
):
    """Batched probit Fisher scoring. Returns (prob, converged, ok).

    ok=False marks members with a single-class response; their probabilities
    are unusable. Covariate columns (everything past a leading all-ones
    intercept) are standardized internally so the iteration path, and hence
    the separation plateau, is invariant to shifting or scaling covariates;
    coefficients are mapped back to the original parameterization.
    """
    B, n, p = X.shape
    ymean = y.mean(axis=1)
    ok = (ymean > 0) & (ymean < 1)

    has_icept = bool(np.all(X[:, :, 0] == 1.0)) and p > 1
    if has_icept:
        mu = X.mean(axis=1)
        sd = X.std(axis=1)
        fix = sd <= 1e-12 * np.maximum(np.abs(mu), 1.0)
        mu = np.where(fix, 0.0, mu)
        sd = np.where(fix, 1.0, sd)
        Xs = (X - mu[:, None, :]) / sd[:, None, :]
    else:
        mu = np.zeros((B, p))
        sd = np.ones((B, p))
        Xs = X

    beta = np.zeros((B, p))
    eta = np.zeros((B, n))
    ll = np.where(y > 0, log_ndtr(eta), log_ndtr(-eta)).sum(axis=1)
    converged = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    active_idx = np.nonzero(ok)[0]
    for _ in range(max_iter):
        if not active_idx.size:
            break
        iters[active_idx] += 1
        Xa = Xs[active_idx]
        ya = y[active_idx]
        beta_a = beta[active_idx]
        eta_a = eta[active_idx]
        ll_a = ll[active_idx]
        eta_c = np.clip(eta_a, -_ETA_CLIP, _ETA_CLIP)
        prob = np.clip(ndtr(eta_c), _P_FLOOR, 1.0 - 1e-16)
        phi = np.exp(-0.5 * eta_c**2) / np.sqrt(2.0 * np.pi)
        w = phi * phi / (prob * (1.0 - prob))
        z = eta_a + (ya - prob) / np.clip(phi, _P_FLOOR, None)
        xw = Xa * w[:, :, None]
        xtwx = np.einsum("bnp,bnq->bpq", Xa, xw)
        xtwz = np.einsum("bnp,bn->bp", xw, z)
        # Separated columns drive their weights to zero; a tiny relative
        # ridge keeps the scoring step defined on the likelihood plateau.
        tr = np.einsum("bii->b", xtwx) / p
        ridge = 1e-10 * np.maximum(tr, 1e-30)
        xtwx += ridge[:, None, None] * np.eye(p)
        beta_new = np.linalg.solve(xtwx, xtwz[..., None])[..., 0]
        eta_new = np.einsum("bnp,bp->bn", Xa, beta_new)
        ll_new = np.where(ya > 0, log_ndtr(eta_new), log_ndtr(-eta_new)).sum(axis=1)
        # Halve the step where the likelihood worsened (rare; separation).
        worse = ll_new < ll_a
        step = np.ones(active_idx.size)
        for _ in range(30):
            if not worse.any():
                break
            step[worse] *= 0.5
            mix = beta_a + step[:, None] * (beta_new - beta_a)
            eta_try = np.einsum("bnp,bp->bn", Xa[worse], mix[worse])
            ll_try = np.where(ya[worse] > 0, log_ndtr(eta_try), log_ndtr(-eta_try)).sum(axis=1)
            improved = ll_try >= ll_a[worse]
            wi = np.nonzero(worse)[0]
            upd = wi[improved]
            beta_new[upd] = mix[upd]
            eta_new[upd] = eta_try[improved]
            ll_new[upd] = ll_try[improved]
            worse[upd] = False
        done = np.abs(ll_new - ll_a) <= rel_tol * (np.abs(ll_a) + rel_tol)
        beta[active_idx] = beta_new
        eta[active_idx] = eta_new
        ll[active_idx] = ll_new
        converged[active_idx[done]] = True
        active_idx = active_idx[~done]
    prob_out = np.clip(ndtr(np.clip(eta, -_ETA_CLIP, _ETA_CLIP)), _P_FLOOR, 1.0 - 1e-16)
    if not full_output:
        return prob_out, converged, ok
    beta_orig = beta / sd
    if has_icept:
        beta_orig[:, 0] = beta[:, 0] - np.einsum("bj,bj->b", beta[:, 1:] / sd[:, 1:], mu[:, 1:])
    return prob_out, converged, ok, beta_orig, ll, iters


def z_quantile(p: float) -> float:
    """Standard normal quantile."""
    return float(ndtri(p))
