"""Independent reference computations used by the tests.

Nothing here imports the code under test except plain data containers.
Each oracle takes a different route from the implementation: explicit
loops instead of Kronecker products, dense eigensolves instead of
closed-form spectra, quadrature instead of sampling, multiprecision
arithmetic instead of floating point.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np
from scipy import integrate, stats


# ---------------------------------------------------------------------------
# lattice precision by neighbour enumeration
# ---------------------------------------------------------------------------

def dense_structure(n: int) -> np.ndarray:
    """First-order random-walk structure matrix built from its n-1 edges."""
    r = np.zeros((n, n))
    for i in range(n - 1):
        r[i, i] += 1
        r[i + 1, i + 1] += 1
        r[i, i + 1] -= 1
        r[i + 1, i] -= 1
    return r


def dense_precision(n_ages: int, n_years: int, tau: float, rho_age: float) -> np.ndarray:
    """Q from the lattice edges: each age edge adds tau*rho_age, each year edge tau*(2-rho_age).

    Cells are stored age-major: index = age * n_years + year.
    """
    rho_year = 2.0 - rho_age
    size = n_ages * n_years
    q = np.zeros((size, size))

    def edge(i, j, w):
        q[i, i] += w
        q[j, j] += w
        q[i, j] -= w
        q[j, i] -= w

    for a in range(n_ages):
        for t in range(n_years):
            here = a * n_years + t
            if a + 1 < n_ages:
                edge(here, (a + 1) * n_years + t, tau * rho_age)
            if t + 1 < n_years:
                edge(here, a * n_years + t + 1, tau * rho_year)
    return q


def lattice_nnz(n_ages: int, n_years: int) -> int:
    """Nonzeros of Q: one diagonal entry per cell plus two per neighbour pair."""
    edges = (n_ages - 1) * n_years + n_ages * (n_years - 1)
    return n_ages * n_years + 2 * edges


def dense_gen_logdet(q: np.ndarray, tol: float = 1e-9) -> tuple[float, int]:
    """Sum of logs of the eigenvalues above ``tol * max``, and how many were dropped."""
    ev = np.linalg.eigvalsh(q)
    keep = ev > tol * ev.max()
    return float(np.sum(np.log(ev[keep]))), int((~keep).sum())


def dense_future_conditional(n_ages, n_years, k, tau, rho_age, b, x_obs):
    """Mean and covariance of future years given observed years by explicit inversion."""
    q = dense_precision(n_ages, n_years + k, tau, rho_age)
    years = np.tile(np.arange(1, n_years + k + 1), n_ages)
    mu = b * years
    fut = years > n_years
    obs = ~fut
    q_ff = q[np.ix_(fut, fut)]
    q_fo = q[np.ix_(fut, obs)]
    cov = np.linalg.inv(q_ff)
    mean = mu[fut] - cov @ q_fo @ (np.ravel(x_obs) - mu[obs])
    return mean, cov


# ---------------------------------------------------------------------------
# Heligman-Pollard curve in multiprecision
# ---------------------------------------------------------------------------

def _odds_mp(z, A, B, C, D, E, F, G, H):
    z = mpmath.mpf(int(z))
    child = A ** ((z + B) ** C)
    hump = mpmath.mpf(0) if z == 0 else D * mpmath.exp(-E * (mpmath.log(z) - mpmath.log(F)) ** 2)
    return child + hump + G * H ** z


def hp_odds_mp(z, A, B, C, D, E, F, G, H, dps: int = 60):
    with mpmath.workdps(dps):
        return _odds_mp(z, *(mpmath.mpf(str(v)) for v in (A, B, C, D, E, F, G, H)))


def natural_mp(psi):
    """Natural HP parameters from the transformed vector, in multiprecision."""
    e = [v if isinstance(v, mpmath.mpf) else mpmath.mpf(str(float(v))) for v in psi]
    sig = lambda v: 1 / (1 + mpmath.exp(-v))  # noqa: E731
    return (sig(e[0]), sig(e[1]), sig(e[2]), sig(e[3]), mpmath.exp(e[4]),
            10 + 30 * sig(e[5]), sig(e[6]), mpmath.exp(e[7]))


def odds_gradient_mp(z, psi, dps=40):
    """d K / d psi at one age by multiprecision numerical differentiation."""
    out = []
    with mpmath.workdps(dps):
        base = [mpmath.mpf(str(float(v))) for v in psi]
        for i in range(8):
            def f(v, i=i):
                args = list(base)
                args[i] = v
                return _odds_mp(z, *natural_mp(args))
            out.append(float(mpmath.diff(f, base[i])))
    return out


# ---------------------------------------------------------------------------
# one-dimensional quadrature and KS
# ---------------------------------------------------------------------------

def grid_cdf(log_density, lo: float, hi: float, n: int = 20001):
    """Normalized CDF of an unnormalized log density on [lo, hi] by trapezoid rule."""
    xs = np.linspace(lo, hi, n)
    lp = np.array([log_density(v) for v in xs])
    dens = np.exp(lp - lp.max())
    cdf = integrate.cumulative_trapezoid(dens, xs, initial=0.0)
    return xs, cdf / cdf[-1]


def ks_distance(samples, xs, cdf) -> float:
    """Sup distance between the empirical CDF of ``samples`` and a tabulated CDF."""
    s = np.sort(np.asarray(samples))
    m = s.size
    f = np.interp(s, xs, cdf)
    upper = np.arange(1, m + 1) / m - f
    lower = f - np.arange(0, m) / m
    return float(max(upper.max(), lower.max()))


def truncnorm_moments(mean, sd, lo, hi):
    """Mean and variance of N(mean, sd^2) on [lo, hi] via the Mills-ratio formulas."""
    a, b = (lo - mean) / sd, (hi - mean) / sd
    phi_a = 0.0 if math.isinf(a) else stats.norm.pdf(a)
    phi_b = 0.0 if math.isinf(b) else stats.norm.pdf(b)
    # upper-tail intervals use survival functions so the mass does not cancel to zero
    mass = stats.norm.sf(a) - stats.norm.sf(b) if a > 0 else stats.norm.cdf(b) - stats.norm.cdf(a)
    m1 = (phi_a - phi_b) / mass
    a_phi = 0.0 if math.isinf(a) else a * phi_a
    b_phi = 0.0 if math.isinf(b) else b * phi_b
    var = 1.0 + (a_phi - b_phi) / mass - m1 ** 2
    return mean + sd * m1, sd * sd * var


def half_t_cdf(x, nu, scale):
    return 2.0 * stats.t.cdf(np.asarray(x) / scale, nu) - 1.0
