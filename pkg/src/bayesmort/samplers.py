"""Stochastic kernels and chain diagnostics shared by both models.

Every sampler takes an explicit ``numpy.random.Generator``; nothing here
touches a global generator. Generators are built on Philox (counter based)
so independent streams can be spawned for concurrent chains.

Parameterizations:

* ``rinvwishart(df, scale)`` has density proportional to
  ``|X|^{-(df+p+1)/2} exp(-tr(scale X^{-1}) / 2)``; its mean is
  ``scale / (df - p - 1)``.
* ``rinvgamma(shape, rate)`` has density proportional to
  ``x^{-shape-1} exp(-rate / x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from .errors import ValidationError

# standardized bound beyond which inverse-CDF sampling loses precision
TAIL_CUTOFF = 5.0


def make_rng(seed=None) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed`` (int or SeedSequence)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Independent child generators, stable regardless of scheduling order."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(n)]


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------

def _upper_tail(a: float, b: float, rng: np.random.Generator) -> float:
    """Standard normal restricted to [a, b] with a >= TAIL_CUTOFF."""
    if a * (b - a) < 1.0:
        # narrow interval: uniform proposal, acceptance >= exp(-1/2 - (b-a)^2/2)
        while True:
            z = a + (b - a) * rng.random()
            if math.log(rng.random()) <= -0.5 * (z * z - a * a):
                return z
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.standard_exponential() / lam
        if z > b:
            continue
        if math.log(rng.random()) <= -0.5 * (z - lam) ** 2:
            return z


def _std_truncnorm(a: float, b: float, rng: np.random.Generator) -> float:
    if a >= TAIL_CUTOFF:
        return _upper_tail(a, b, rng)
    if b <= -TAIL_CUTOFF:
        return -_upper_tail(-b, -a, rng)
    if a > 0.0:
        # work in the lower tail where ndtr keeps relative precision
        lo, hi = ndtr(-b), ndtr(-a)
        return -float(ndtri(lo + (hi - lo) * rng.random()))
    lo, hi = ndtr(a), ndtr(b)
    return float(ndtri(lo + (hi - lo) * rng.random()))


def rtruncnorm(mean: float, sd: float, lo: float, hi: float,
               rng: np.random.Generator) -> float:
    """Exact draw from N(mean, sd^2) restricted to [lo, hi].

    Inverse-CDF inside the body of the distribution and exponential
    rejection (Robert, 1995) once the interval lies beyond 5 sd. Either
    bound may be infinite.
    """
    if not lo < hi:
        raise ValidationError(f"empty truncation interval [{lo}, {hi}]")
    if not sd > 0:
        raise ValidationError(f"sd must be positive, got {sd}")
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    z = _std_truncnorm(a, b, rng)
    return min(max(mean + sd * z, lo), hi)


def rtmvnorm_gibbs(mean, cov, lo, hi, sweeps: int, rng: np.random.Generator,
                   start=None) -> np.ndarray:
    """Approximate draw from N(mean, cov) truncated to the box [lo, hi].

    Runs ``sweeps`` coordinate-wise Gibbs sweeps with exact univariate
    truncated-normal conditionals, starting from ``start`` or from the mean
    clamped into the box.
    """
    mean = np.asarray(mean, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), mean.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), mean.shape)
    if np.any(lo >= hi):
        raise ValidationError("empty truncation box")
    try:
        chol = linalg.cho_factor(np.asarray(cov, dtype=float), lower=True)
    except linalg.LinAlgError as exc:
        raise ValidationError("covariance is not positive definite") from exc
    prec = linalg.cho_solve(chol, np.eye(mean.size))
    return _gibbs_sweeps(mean, prec, lo, hi, sweeps, rng, start)


def _gibbs_sweeps(mean, prec, lo, hi, sweeps, rng, start=None):
    x = np.clip(mean, lo, hi) if start is None else np.array(start, dtype=float)
    diag = np.diag(prec).copy()
    sd = 1.0 / np.sqrt(diag)
    dev = x - mean
    for _ in range(sweeps):
        for i in range(mean.size):
            shift = (prec[i] @ dev - diag[i] * dev[i]) / diag[i]
            m = mean[i] - shift
            x[i] = rtruncnorm(m, sd[i], lo[i], hi[i], rng)
            dev[i] = x[i] - mean[i]
    return x


# ---------------------------------------------------------------------------
# Wishart family
# ---------------------------------------------------------------------------

def rinvwishart(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw via the Bartlett decomposition of its inverse."""
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if not df > p - 1:
        raise ValidationError(f"df={df} must exceed dim-1={p - 1}")
    try:
        u = linalg.cholesky(scale, lower=False)  # scale = u'u
    except linalg.LinAlgError as exc:
        raise ValidationError("inverse-Wishart scale is not SPD") from exc
    # X^{-1} = u^{-1} A A' u^{-T} ~ Wishart(df, scale^{-1}), A lower Bartlett factor
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    rows, cols = np.tril_indices(p, -1)
    a[rows, cols] = rng.standard_normal(rows.size)
    b = linalg.solve_triangular(a, u, lower=True)
    x = b.T @ b
    return 0.5 * (x + x.T)


def rinvgamma(shape, rate, rng: np.random.Generator):
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValidationError("inverse-gamma shape and rate must be positive")
    out = rate / rng.standard_gamma(shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# diagnostics and adaptation
# ---------------------------------------------------------------------------

def _autocovariance(x: np.ndarray) -> np.ndarray:
    m = x.size
    n_fft = 1 << (2 * m - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), n_fft)
    return np.fft.irfft(f * np.conj(f), n_fft)[:m] / m


def ess(series, full: bool = False):
    """Effective sample size ``s^2 M / gamma_0``.

    ``gamma_0`` (the spectral density at zero) is estimated with Geyer's
    initial monotone positive sequence. The result is clipped to ``(0, M]``:
    antithetic chains report ``M``. A constant series also reports ``M``
    and, with ``full=True``, is flagged as degenerate via the second
    element of the returned tuple.
    """
    x = np.asarray(series, dtype=float).ravel()
    m = x.size
    if m < 10:
        raise ValidationError(f"need at least 10 draws for ESS, got {m}")
    acov = _autocovariance(x)
    gamma0 = acov[0]
    scale = max(1.0, float(np.max(np.abs(x))))
    if np.all(x == x[0]) or not gamma0 > (1e-14 * scale) ** 2:
        return (float(m), True) if full else float(m)
    n_pairs = m // 2
    pairs = acov[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    nonpos = np.flatnonzero(pairs <= 0)
    stop = nonpos[0] if nonpos.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:stop])
    sigma2 = -gamma0 + 2.0 * pairs.sum()
    value = float(m) if sigma2 <= 0 else float(min(m, m * gamma0 / sigma2))
    return (value, False) if full else value


def robbins_monro_adapt(current_log_scale: float, acceptance_indicator: float,
                        target: float, iteration: int, burnin: int | None = None) -> float:
    """One Robbins-Monro step on a log scale with gain ``iteration^-0.6``.

    Returns ``current_log_scale`` unchanged once ``iteration > burnin``.
    """
    if burnin is not None and iteration > burnin:
        return current_log_scale
    return current_log_scale + (acceptance_indicator - target) * iteration ** -0.6


@dataclass
class ChainDiagnostics:
    """Per-scalar ESS, per-block acceptance rates and adapted tuning constants."""

    n_draws: int
    ess: dict[str, float] = field(default_factory=dict)
    degenerate: list[str] = field(default_factory=list)
    acceptance: dict[str, float] = field(default_factory=dict)
    tuning: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    def add_ess(self, name: str, series) -> None:
        value, flag = ess(series, full=True)
        self.ess[name] = value
        if flag:
            self.degenerate.append(name)

    def as_dict(self) -> dict:
        return {
            "n_draws": self.n_draws,
            "ess": dict(self.ess),
            "degenerate_series": list(self.degenerate),
            "acceptance": dict(self.acceptance),
            "tuning": dict(self.tuning),
            "wall_time_seconds": self.wall_time,
        }
