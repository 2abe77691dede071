"""Synthetic mortality grids with known truth, for testing and demos."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .gmrf import GMRFHyper, Lattice
from .hpcurve import DEFAULT_BOX, HPNatural, TruncationBox, hp_prob, transform
from .lifetable import MortalityGrid
from .samplers import rtmvnorm_gibbs

# a female-like curve: infant dip, small accident hump, Gompertz tail
TYPICAL_HP = HPNatural(A=6e-4, B=0.02, C=0.12, D=8e-4, E=8.0, F=22.0, G=6e-5, H=1.1)

# year-on-year innovation sds of the transformed parameters; H enters as
# H^z, so its log moves far less than the others in real data
TYPICAL_STEP_SD = np.array([0.05, 0.1, 0.05, 0.05, 0.05, 0.03, 0.03, 0.002])


def binomial_grid(p, ages, years, exposure, rng, sex="female") -> MortalityGrid:
    p = np.asarray(p, dtype=float)
    n = np.broadcast_to(np.asarray(exposure, dtype=float), p.shape).copy()
    d = rng.binomial(n.astype(np.int64), p).astype(float)
    return MortalityGrid(ages, years, d, n, sex)


def smooth_logit_surface(ages, n_years: int, improvement=(0.01, 0.03)) -> np.ndarray:
    """Logit death probabilities: a fixed HP curve with age-varying linear improvement."""
    ages = np.asarray(ages)
    p0 = hp_prob(ages, transform(TYPICAL_HP))
    base = np.log(p0 / (1 - p0))
    lo, hi = improvement
    kappa = lo + (hi - lo) * np.sin(np.pi * (ages - ages[0]) / max(ages[-1] - ages[0], 1)) ** 2
    t = np.arange(1, n_years + 1)
    return base[:, None] - kappa[:, None] * t[None, :]


def gmrf_surface_grid(rng, ages=range(90), first_year=1983, n_years=10, exposure=1e5):
    ages = np.asarray(list(ages))
    x = smooth_logit_surface(ages, n_years)
    years = np.arange(first_year, first_year + n_years)
    return binomial_grid(expit(x), ages, years, exposure, rng), x


def igmrf_field(n_ages: int, n_years: int, hyper: GMRFHyper, rng, anchor: float = 0.0) -> np.ndarray:
    """A draw from the intrinsic GMRF with cell (0, 1) pinned at ``anchor + b``."""
    lattice = Lattice(n_ages, n_years)
    q = lattice.precision(hyper).toarray()
    mu = lattice.mean(hyper.b)
    free = np.arange(1, lattice.size)
    q_ff = q[np.ix_(free, free)]
    dev0 = anchor
    cond_mean = mu[free] - np.linalg.solve(q_ff, q[free, 0] * dev0)
    chol = np.linalg.cholesky(q_ff)
    x = np.empty(lattice.size)
    x[0] = mu[0] + dev0
    x[free] = cond_mean + np.linalg.solve(chol.T, rng.standard_normal(free.size))
    return x.reshape(n_ages, n_years)


def hp_path(rng, n_years: int, psi0=None, drift=None, cov=None,
            box: TruncationBox = DEFAULT_BOX) -> np.ndarray:
    """A truncated Gaussian random walk of HP states starting at ``psi0``."""
    psi0 = transform(TYPICAL_HP) if psi0 is None else np.asarray(psi0, dtype=float)
    if not box.contains(psi0):
        raise ValidationError("psi0 lies outside the truncation box")
    drift = np.zeros(8) if drift is None else np.asarray(drift, dtype=float)
    cov = np.diag(TYPICAL_STEP_SD ** 2) if cov is None else np.asarray(cov, dtype=float)
    path = [psi0]
    for _ in range(n_years - 1):
        path.append(rtmvnorm_gibbs(path[-1] + drift, cov, box.lower, box.upper, 10, rng))
    return np.array(path)


def hp_path_grid(rng, n_years=10, ages=range(90), first_year=1983, exposure=1e5, **path_kw):
    ages = np.asarray(list(ages))
    psi = hp_path(rng, n_years, **path_kw)
    p = hp_prob(ages, psi).T
    years = np.arange(first_year, first_year + n_years)
    return binomial_grid(p, ages, years, exposure, rng), psi
