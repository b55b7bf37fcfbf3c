"""Bootstrap and jackknife standard errors, basic bootstrap intervals, and
the one-sided test used for type I error and power."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrialData
from .gest import G_METHODS, _Batch, evaluate_methods, ols_benchmark
from .regress import z_quantile
from .streams import StreamKey, derive_stream

Z_975 = z_quantile(0.975)


class ResampleError(RuntimeError):
    pass


@dataclass
class BootstrapResult:
    se: float
    ci_basic: tuple[float, float]
    replicates: np.ndarray


@dataclass
class InferenceResult:
    se_model: float
    se_bootstrap: float | None = None
    se_jackknife: float | None = None
    ci_basic: tuple[float, float] | None = None
    reject_model: bool | None = None
    reject_bootstrap: bool | None = None
    reject_jackknife: bool | None = None
    B: int = 0


def wald_test(theta_hat: float, se: float, alpha_one_sided: float = 0.025) -> bool:
    """One-sided test of no effect against benefit (negative effect)."""
    if not se > 0:
        raise ValueError("se must be positive")
    return bool(theta_hat / se < -z_quantile(1.0 - alpha_one_sided))


def basic_ci_reject(ci_basic, alpha_one_sided: float = 0.025) -> bool:
    """Decision by basic-CI inversion: the matching two-sided interval lies
    entirely on the benefit side."""
    if abs(alpha_one_sided - 0.025) > 1e-12:
        raise ValueError("basic-CI decision is defined for the 95% interval")
    return bool(ci_basic[1] < 0.0)


def _basic_ci(theta_hat: float, replicates: np.ndarray) -> tuple[float, float]:
    lo_q, hi_q = np.quantile(replicates, (0.025, 0.975))
    return (2.0 * theta_hat - hi_q, 2.0 * theta_hat - lo_q)


def _point_estimates(trial: TrialData, methods, options=None) -> dict:
    batch = _Batch.from_trial(trial)
    res = evaluate_methods(batch, methods, options)
    for m in methods:
        if not res[m]["ok"][0]:
            raise ResampleError(f"{m}: estimator failed on the full sample")
    return {m: float(res[m]["theta"][0]) for m in methods}


def bootstrap_all(
    trial: TrialData,
    methods,
    B: int,
    key: StreamKey,
    options=None,
    max_redraw_factor: int = 10,
) -> dict:
    """Patient-level bootstrap of several estimators over shared resamples.

    Whole patient rows are resampled with replacement. Replicates on which
    any requested estimator hits a degenerate design are redrawn (all
    methods together, keeping the sharing exact), with the total number of
    redraws capped at ``max_redraw_factor * B``.
    """
    methods = tuple(methods)
    bad = [m for m in methods if m not in G_METHODS]
    if bad:
        raise ValueError(f"batched bootstrap supports {G_METHODS}, got {bad}")
    if B < 2:
        raise ValueError("need at least two replicates")
    n = trial.n
    stream = derive_stream(key)
    theta_full = _point_estimates(trial, methods, options)

    reps = {m: np.full(B, np.nan) for m in methods}
    pending = B
    redraws = 0
    while pending:
        idx = stream.integers(0, n, size=(pending, n))
        res = evaluate_methods(_Batch.from_trial(trial, idx), methods, options)
        ok = np.ones(pending, dtype=bool)
        for m in methods:
            ok &= res[m]["ok"]
        slots = np.nonzero(np.isnan(reps[methods[0]]))[0][: ok.sum()]
        good = np.nonzero(ok)[0][: slots.size]
        for m in methods:
            reps[m][slots] = res[m]["theta"][good]
        failed = pending - int(ok.sum())
        redraws += failed
        if redraws > max_redraw_factor * B:
            raise ResampleError(
                f"bootstrap exceeded {max_redraw_factor * B} redraws "
                f"(estimators: {', '.join(methods)})"
            )
        pending = int(np.isnan(reps[methods[0]]).sum())
    out = {}
    for m in methods:
        r = reps[m]
        out[m] = BootstrapResult(
            se=float(np.std(r, ddof=1)),
            ci_basic=_basic_ci(theta_full[m], r),
            replicates=r,
        )
    return out


def bootstrap(
    trial: TrialData,
    estimator: str,
    B: int,
    key: StreamKey,
    options=None,
    max_redraw_factor: int = 10,
) -> BootstrapResult:
    """Bootstrap one estimator; see :func:`bootstrap_all`.

    ``estimator`` may also be ``mmrm`` or ``benchmark``, evaluated replicate
    by replicate.
    """
    if estimator in G_METHODS:
        return bootstrap_all(trial, (estimator,), B, key, options, max_redraw_factor)[estimator]
    point, evaluate = _generic_estimator(trial, estimator)
    stream = derive_stream(key)
    reps = np.empty(B)
    filled = 0
    redraws = 0
    while filled < B:
        idx = stream.integers(0, trial.n, size=trial.n)
        try:
            reps[filled] = evaluate(idx)
            filled += 1
        except Exception:
            redraws += 1
            if redraws > max_redraw_factor * B:
                raise ResampleError(
                    f"bootstrap exceeded {max_redraw_factor * B} redraws ({estimator})"
                )
    return BootstrapResult(
        se=float(np.std(reps, ddof=1)), ci_basic=_basic_ci(point, reps), replicates=reps
    )


def _generic_estimator(trial: TrialData, estimator: str):
    from .mmrm import estimate_mmrm

    def subset(idx):
        return TrialData(
            treat=trial.treat[idx], y0=trial.y0[idx], y05=trial.y05[idx],
            y1=trial.y1[idx], y15=trial.y15[idx], y2=trial.y2[idx],
            sym05=trial.sym05[idx], sym1=trial.sym1[idx], sym15=trial.sym15[idx],
            y2_star=None if trial.y2_star is None else trial.y2_star[idx],
        )

    if estimator == "mmrm":
        point = estimate_mmrm(trial).theta_hat
        return point, lambda idx: estimate_mmrm(subset(idx)).theta_hat
    if estimator == "benchmark":
        point = ols_benchmark(trial).theta_hat
        return point, lambda idx: ols_benchmark(subset(idx)).theta_hat
    raise ValueError(f"unknown estimator {estimator!r}")


def jackknife_all(trial: TrialData, methods, options=None) -> dict:
    """Leave-one-patient-out standard errors for several estimators at once.

    Any leave-one-out failure is an error; silent skipping would bias the
    spread of the pseudo-replicates.
    """
    methods = tuple(methods)
    n = trial.n
    if n < 2:
        raise ValueError("jackknife needs at least two patients")
    base = np.arange(n)
    idx = np.stack([np.delete(base, i) for i in range(n)])
    res = evaluate_methods(_Batch.from_trial(trial, idx), methods, options)
    out = {}
    for m in methods:
        if not res[m]["ok"].all():
            i = int(np.nonzero(~res[m]["ok"])[0][0])
            raise ResampleError(f"{m}: leave-one-out fit failed (patient {i})")
        theta = res[m]["theta"]
        out[m] = float(np.sqrt((n - 1) / n * np.sum((theta - theta.mean()) ** 2)))
    return out


def jackknife(trial: TrialData, estimator: str, options=None) -> float:
    if estimator in G_METHODS:
        return jackknife_all(trial, (estimator,), options)[estimator]
    _, evaluate = _generic_estimator(trial, estimator)
    n = trial.n
    base = np.arange(n)
    theta = np.empty(n)
    for i in range(n):
        try:
            theta[i] = evaluate(np.delete(base, i))
        except Exception as exc:
            raise ResampleError(f"{estimator}: leave-one-out fit failed (patient {i})") from exc
    return float(np.sqrt((n - 1) / n * np.sum((theta - theta.mean()) ** 2)))
