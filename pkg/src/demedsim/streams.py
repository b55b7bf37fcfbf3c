"""Splittable deterministic random streams and the sampling laws of the trial DGM.

Streams are keyed by a master seed plus an integer path, so any unit of work
(scenario, trial, bootstrap replicate, draw site) can derive its own stream
and reproduce it independently of execution order or worker count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri


class RejectionBudgetError(RuntimeError):
    """Rejection sampling exhausted its attempt budget (mass-starved bounds)."""


@dataclass(frozen=True)
class StreamKey:
    """Address of a deterministic random stream: (master_seed, path)."""

    master_seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        path = tuple(int(p) for p in self.path)
        if any(p < 0 for p in path):
            raise ValueError("path components must be non-negative integers")
        object.__setattr__(self, "path", path)

    def child(self, *indices: int) -> "StreamKey":
        """Derive a sub-key by appending path components."""
        return StreamKey(self.master_seed, self.path + tuple(int(i) for i in indices))


def derive_stream(key: StreamKey) -> np.random.Generator:
    """Return the generator addressed by ``key``.

    Uses a counter-based bit generator (Philox) keyed by hashing
    (master_seed, path), so distinct paths give statistically independent
    streams and the same key always reproduces the same sequence.
    """
    seq = np.random.SeedSequence(key.master_seed, spawn_key=key.path)
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class TruncatedBivariateNormalSpec:
    """Joint law of (baseline severity, decline rate) with the first
    coordinate restricted to a closed interval."""

    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]
    first_coord_bounds: tuple[float, float]

    def __post_init__(self):
        c = np.asarray(self.cov, dtype=float)
        if c.shape != (2, 2) or not np.allclose(c, c.T):
            raise ValueError("cov must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(c)[0] <= 0:
            raise ValueError("cov must be positive definite")
        lo, hi = self.first_coord_bounds
        if not lo < hi:
            raise ValueError("first_coord_bounds must be a non-empty interval")


def sample_truncated_bivariate_normal(
    spec: TruncatedBivariateNormalSpec,
    stream: np.random.Generator,
    size: int | None = None,
    max_attempts: int = 10**6,
):
    """Draw (y0, alpha) jointly Gaussian, rejecting until y0 lies in bounds.

    The truncation applies to the first coordinate only; the joint draw is
    rejected as a pair, which preserves the conditional law of alpha given
    the retained y0. Raises :class:`RejectionBudgetError` when more than
    ``max_attempts`` proposals per requested sample are needed.
    """
    scalar = size is None
    n = 1 if scalar else int(size)
    mean = np.asarray(spec.mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(spec.cov, dtype=float))
    lo, hi = spec.first_coord_bounds

    y0 = np.empty(n)
    alpha = np.empty(n)
    remaining = np.arange(n)
    attempts = 0
    while remaining.size:
        m = remaining.size
        z = stream.standard_normal((m, 2))
        draw = mean + z @ chol.T
        ok = (draw[:, 0] >= lo) & (draw[:, 0] <= hi)
        idx = remaining[ok]
        y0[idx] = draw[ok, 0]
        alpha[idx] = draw[ok, 1]
        remaining = remaining[~ok]
        attempts += 1
        if remaining.size and attempts * max(n, 1) > max_attempts * n:
            raise RejectionBudgetError(
                f"truncation bounds [{lo}, {hi}] retain too little mass "
                f"(no acceptance after {attempts} rounds)"
            )
    if scalar:
        return float(y0[0]), float(alpha[0])
    return y0, alpha


def sample_beta_mean_tau(mean, tau: float, stream: np.random.Generator):
    """Beta draw parameterized by its mean in (0,1) and precision tau > 0.

    Shape parameters are a = mean*tau, b = (1-mean)*tau, so the variance is
    mean*(1-mean)/(tau+1). ``mean`` may be an array; one draw per element.
    """
    mean = np.asarray(mean, dtype=float)
    if np.any(mean <= 0.0) or np.any(mean >= 1.0):
        raise ValueError("mean must lie strictly inside (0, 1)")
    if not tau > 0:
        raise ValueError("tau must be positive")
    return stream.beta(mean * tau, (1.0 - mean) * tau)


def sample_truncated_normal(
    mean, sd, lo: float, hi: float, stream: np.random.Generator, size: int | None = None
):
    """Normal(mean, sd^2) conditioned on [lo, hi], by inverse CDF.

    sd may be 0, in which case the point mass is clamped into the interval.
    The inverse-CDF construction has no rejection loop, so negligible-mass
    intervals degrade gracefully instead of failing.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd < 0):
        raise ValueError("sd must be non-negative")
    shape = np.broadcast_shapes(mean.shape, sd.shape, () if size is None else (size,))
    mean = np.broadcast_to(mean, shape)
    sd = np.broadcast_to(sd, shape)
    u = stream.uniform(size=shape)

    out = np.clip(mean, lo, hi)  # sd == 0 case
    pos = sd > 0
    if np.any(pos):
        m, s = mean[pos], sd[pos]
        a = (lo - m) / s
        b = (hi - m) / s
        # Work in the lower tail for numerical stability when both bounds
        # sit far above the mean.
        flip = a > -b
        a_w = np.where(flip, -b, a)
        b_w = np.where(flip, -a, b)
        fa, fb = ndtr(a_w), ndtr(b_w)
        q = ndtri(fa + u[pos] * np.clip(fb - fa, 1e-300, None))
        z = np.where(flip, -q, q)
        vals = np.clip(m + s * z, lo, hi)
        out = out.copy()
        out[pos] = vals
    if size is None and out.shape == ():
        return float(out)
    return out
