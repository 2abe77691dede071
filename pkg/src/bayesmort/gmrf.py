"""Intrinsic non-isotropic GMRF for logit death probabilities on the age x year lattice.

The latent surface ``x`` is stored age-major: cell (z, t) sits at index
``z * T + t``, i.e. the C-order flattening of an ``(n_ages, T)`` array. With
this ordering the precision is literally::

    Q = tau * (rho_age * R_A kron I_T + rho_year * I_A kron R_T)

with ``rho_year = 2 - rho_age`` and ``R_n`` the first-order random-walk
structure matrix. The prior mean is ``t * b`` at every age in year ``t``.

Latent states are updated with the gradient-based auxiliary sampler:
an auxiliary Gaussian ``u`` around a half gradient step, a proposal from the
Gaussian proportional to ``N(x'; u, delta/2 I) * prior(x')`` (a proper
Gaussian with precision ``Q + 2/delta I``), and an MH correction that only
involves the likelihood. Hyperpriors: ``tau ~ Gamma(1, 0.005)`` (rate),
``b ~ N(0, 1e6)``, ``rho_age ~ U(0, 2)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import sparse
from scipy.special import expit

from ._banded import BandedSPD, upper_band
from .draws import PosteriorDraws
from .errors import ValidationError
from .forecast import ForecastSet
from .lifetable import MortalityGrid
from .samplers import ChainDiagnostics, make_rng, robbins_monro_adapt


@dataclass(frozen=True)
class GMRFHyper:
    tau: float
    rho_age: float
    b: float = 0.0

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.rho_age < 2.0:
            raise ValidationError(f"rho_age must lie in (0, 2), got {self.rho_age}")

    @property
    def rho_year(self) -> float:
        return 2.0 - self.rho_age


@dataclass(frozen=True)
class GMRFPrior:
    a_tau: float = 1.0
    b_tau: float = 0.005
    sigma_b2: float = 1e6


def structure_matrix(n: int) -> sparse.csr_matrix:
    """First-order random-walk structure matrix: diagonal (1, 2, ..., 2, 1), -1 off-diagonal."""
    if n < 1:
        raise ValidationError("structure matrix needs n >= 1")
    if n == 1:
        return sparse.csr_matrix((1, 1))
    diag = np.full(n, 2.0)
    diag[[0, -1]] = 1.0
    off = -np.ones(n - 1)
    return sparse.diags([off, diag, off], [-1, 0, 1], format="csr")


def structure_eigenvalues(n: int) -> np.ndarray:
    return 2.0 - 2.0 * np.cos(np.arange(n) * np.pi / n)


def _ordering(n_ages: int, n_years: int) -> np.ndarray | None:
    """Bandwidth-minimizing permutation: the shorter lattice axis runs fastest."""
    if n_years <= n_ages:
        return None
    return np.arange(n_ages * n_years).reshape(n_ages, n_years).T.ravel()


class Lattice:
    """Hyperparameter-free pieces of the precision on an ``n_ages x n_years`` lattice."""

    def __init__(self, n_ages: int, n_years: int):
        if n_ages < 1 or n_years < 1:
            raise ValidationError("lattice needs at least one age and one year")
        self.n_ages, self.n_years = n_ages, n_years
        self.size = n_ages * n_years
        self.rank = self.size - 1
        eye_a, eye_t = sparse.identity(n_ages), sparse.identity(n_years)
        self.k_age = sparse.kron(structure_matrix(n_ages), eye_t, format="csr")
        self.k_year = sparse.kron(eye_a, structure_matrix(n_years), format="csr")
        self.k_age.eliminate_zeros()
        self.k_year.eliminate_zeros()
        self.lam = structure_eigenvalues(n_ages)
        self.gam = structure_eigenvalues(n_years)
        self.steps = np.tile(np.arange(1.0, n_years + 1), n_ages)
        self.perm = _ordering(n_ages, n_years)
        pattern = self.k_age + self.k_year + sparse.identity(self.size)
        bw = upper_band(pattern, self.perm).shape[0] - 1
        self._band_age = upper_band(self.k_age, self.perm, bw)
        self._band_year = upper_band(self.k_year, self.perm, bw)
        self._band_eye = upper_band(sparse.identity(self.size), self.perm, bw)
        self._age_steps = self.k_age @ self.steps
        self._year_steps = self.k_year @ self.steps

    def precision(self, hyper: GMRFHyper) -> sparse.csr_matrix:
        return (hyper.tau * (hyper.rho_age * self.k_age + hyper.rho_year * self.k_year)).tocsr()

    def factor(self, hyper: GMRFHyper, shift: float) -> BandedSPD:
        """Cholesky factor of ``Q + shift * I``."""
        ab = hyper.tau * (hyper.rho_age * self._band_age + hyper.rho_year * self._band_year)
        ab = ab + shift * self._band_eye
        return BandedSPD(ab, self.perm)

    def matvec(self, hyper: GMRFHyper, v: np.ndarray) -> np.ndarray:
        return hyper.tau * (hyper.rho_age * (self.k_age @ v) + hyper.rho_year * (self.k_year @ v))

    def mean(self, b: float) -> np.ndarray:
        return b * self.steps

    def quad_forms(self, v: np.ndarray) -> tuple[float, float]:
        """``v' (R_A kron I) v`` and ``v' (I kron R_T) v``."""
        return float(v @ (self.k_age @ v)), float(v @ (self.k_year @ v))


@dataclass
class PrecisionOperator:
    lattice: Lattice
    hyper: GMRFHyper

    @property
    def matrix(self) -> sparse.csr_matrix:
        return self.lattice.precision(self.hyper)

    @property
    def lam(self) -> np.ndarray:
        return self.lattice.lam

    @property
    def gam(self) -> np.ndarray:
        return self.lattice.gam

    def matvec(self, v) -> np.ndarray:
        return self.lattice.matvec(self.hyper, np.asarray(v, dtype=float))


def build_precision(n_ages: int, n_years: int, hyper: GMRFHyper) -> PrecisionOperator:
    """Precision on an ``n_ages x n_years`` lattice (``n_ages = omega + 1``)."""
    if n_ages < 2 or n_years < 2:
        raise ValidationError("the lattice needs at least 2 ages and 2 years")
    return PrecisionOperator(Lattice(n_ages, n_years), hyper)


def _log_eigen_sum(rho_age, lam, gam):
    """Sum of log(rho_age*lam_i + rho_year*gam_j) over (i, j) != (0, 0); vectorized over rho_age."""
    rho = np.asarray(rho_age, dtype=float)[..., None, None]
    ev = rho * lam[:, None] + (2.0 - rho) * gam[None, :]
    ev = ev.reshape(ev.shape[:-2] + (-1,))[..., 1:]
    return np.sum(np.log(ev), axis=-1)


def gen_log_det(hyper: GMRFHyper, n_ages: int, n_years: int) -> float:
    """Log of the product of the nonzero eigenvalues of Q."""
    lam, gam = structure_eigenvalues(n_ages), structure_eigenvalues(n_years)
    rank = n_ages * n_years - 1
    return float(rank * math.log(hyper.tau) + _log_eigen_sum(hyper.rho_age, lam, gam))


def prior_mean(b: float, n_ages: int, years) -> np.ndarray:
    """Age-major mean vector ``t * b`` for year indices ``years`` (1-based, may exceed T)."""
    t = np.asarray(years, dtype=float)
    return np.tile(b * t, n_ages)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def _loglik(x, d, n):
    return float(np.sum(d * x - n * np.logaddexp(0.0, x)))


def _grad(x, d, n):
    return d - n * expit(x)


def loglik(x, grid: MortalityGrid) -> float:
    """Binomial-logit log-likelihood kernel (binomial coefficient dropped)."""
    return _loglik(np.ravel(x), grid.deaths.ravel(), grid.exposures.ravel())


def grad_loglik(x, grid: MortalityGrid) -> np.ndarray:
    return _grad(np.ravel(x), grid.deaths.ravel(), grid.exposures.ravel())


# ---------------------------------------------------------------------------
# auxiliary gradient sampler
# ---------------------------------------------------------------------------

class AuxStep(NamedTuple):
    x: np.ndarray
    accepted: bool
    log_alpha: float
    loglik: float
    grad: np.ndarray


def _f(u, x, g, delta):
    return float((u - x - 0.25 * delta * g) @ g)


def proposal_factor(precision, delta: float) -> BandedSPD:
    """Factor of ``precision + (2/delta) I`` for a generic sparse prior precision."""
    mat = sparse.csr_matrix(precision) + (2.0 / delta) * sparse.identity(precision.shape[0])
    return BandedSPD.from_sparse(mat)


def auxiliary_step(x, current: tuple[float, np.ndarray],
                   loglik_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   factor: BandedSPD, prior_term: np.ndarray, delta: float,
                   rng: np.random.Generator) -> AuxStep:
    """One auxiliary-gradient MH step for a Gaussian prior times a likelihood.

    ``current`` is (log-likelihood, gradient) at ``x``; ``factor`` factorizes
    ``Q + (2/delta) I`` and ``prior_term`` is ``Q @ prior_mean``.
    """
    ll_x, g_x = current
    u = x + 0.5 * delta * g_x + math.sqrt(0.5 * delta) * rng.standard_normal(x.size)
    centre = factor.solve((2.0 / delta) * u + prior_term)
    x_prop = centre + factor.noise(rng)
    ll_p, g_p = loglik_fn(x_prop)
    log_alpha = ll_p - ll_x + _f(u, x_prop, g_p, delta) - _f(u, x, g_x, delta)
    if not np.isfinite(log_alpha):
        log_alpha = -np.inf
    if log_alpha >= 0 or math.log(rng.random()) < log_alpha:
        return AuxStep(x_prop, True, log_alpha, ll_p, g_p)
    return AuxStep(x, False, log_alpha, ll_x, g_x)


def aux_sample_step(x, hyper: GMRFHyper, grid: MortalityGrid, delta: float,
                    rng: np.random.Generator, lattice: Lattice | None = None):
    """One latent-surface update; returns ``(x_new, accepted)``."""
    if not delta > 0:
        raise ValidationError("delta must be positive")
    lattice = lattice or Lattice(*grid.shape)
    d, n = grid.deaths.ravel(), grid.exposures.ravel()
    x = np.asarray(x, dtype=float).ravel()
    step = auxiliary_step(
        x, (_loglik(x, d, n), _grad(x, d, n)), lambda v: (_loglik(v, d, n), _grad(v, d, n)),
        lattice.factor(hyper, 2.0 / delta), lattice.matvec(hyper, lattice.mean(hyper.b)),
        delta, rng)
    return step.x, step.accepted


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------

def tau_conditional(x, hyper: GMRFHyper, lattice: Lattice, prior: GMRFPrior = GMRFPrior()):
    """Shape and rate of the Gamma full conditional of tau."""
    v = np.ravel(x) - lattice.mean(hyper.b)
    qa, qy = lattice.quad_forms(v)
    return prior.a_tau + 0.5 * lattice.rank, prior.b_tau + 0.5 * (hyper.rho_age * qa + hyper.rho_year * qy)


def b_conditional(x, hyper: GMRFHyper, lattice: Lattice, prior: GMRFPrior = GMRFPrior()):
    """Mean and variance of the Gaussian full conditional of the drift b."""
    x = np.ravel(x)
    q_steps = hyper.tau * (hyper.rho_age * lattice._age_steps + hyper.rho_year * lattice._year_steps)
    precision = float(lattice.steps @ q_steps) + 1.0 / prior.sigma_b2
    return float(q_steps @ x) / precision, 1.0 / precision


def rho_log_conditional(rho_age, x, hyper: GMRFHyper, lattice: Lattice) -> np.ndarray:
    """Unnormalized log full conditional of rho_age on (0, 2) under a uniform prior."""
    v = np.ravel(x) - lattice.mean(hyper.b)
    qa, qy = lattice.quad_forms(v)
    rho = np.asarray(rho_age, dtype=float)
    return 0.5 * _log_eigen_sum(rho, lattice.lam, lattice.gam) - 0.5 * hyper.tau * (rho * qa + (2.0 - rho) * qy)


def _rho_step(x, hyper, lattice, rng, step_size):
    phi = math.log(hyper.rho_age / (2.0 - hyper.rho_age))
    phi_new = phi + step_size * rng.standard_normal()
    rho_new = 2.0 * expit(phi_new)
    if not 0.0 < rho_new < 2.0:
        return hyper, False

    def log_target(ph, rho):
        # uniform prior on rho; Jacobian of rho = 2 expit(phi)
        return float(rho_log_conditional(rho, x, hyper, lattice)) - np.logaddexp(0, -ph) - np.logaddexp(0, ph)

    log_ratio = log_target(phi_new, rho_new) - log_target(phi, hyper.rho_age)
    if math.log(rng.random()) < log_ratio:
        return GMRFHyper(hyper.tau, rho_new, hyper.b), True
    return hyper, False


def update_hyper_gmrf(x, hyper: GMRFHyper, lattice: Lattice, rng: np.random.Generator,
                      prior: GMRFPrior = GMRFPrior(), rho_step: float = 0.3):
    """Gibbs draws of tau and b, then a random-walk MH step on logit(rho_age/2).

    Returns ``(new_hyper, rho_accepted)``.
    """
    shape, rate = tau_conditional(x, hyper, lattice, prior)
    hyper = GMRFHyper(rng.gamma(shape, 1.0 / rate), hyper.rho_age, hyper.b)
    mean, var = b_conditional(x, hyper, lattice, prior)
    hyper = GMRFHyper(hyper.tau, hyper.rho_age, mean + math.sqrt(var) * rng.standard_normal())
    return _rho_step(x, hyper, lattice, rng, rho_step)


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

@dataclass
class GMRFConfig:
    iterations: int = 60_000
    burnin: int = 20_000
    thin: int = 10
    seed: int = 0
    delta_target: float = 0.55
    rho_target: float = 0.35
    initial_delta: float | None = None
    prior: GMRFPrior = field(default_factory=GMRFPrior)

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1 or not 0 <= self.burnin < self.iterations:
            raise ValidationError("need iterations >= 1, thin >= 1 and 0 <= burnin < iterations")
        if not (0 < self.delta_target < 1 and 0 < self.rho_target < 1):
            raise ValidationError("acceptance targets must lie in (0, 1)")


def initial_state(grid: MortalityGrid, lattice: Lattice) -> tuple[np.ndarray, GMRFHyper]:
    """Empirical logits with a 0.5 continuity correction and moment-matched hyperparameters."""
    d, n = grid.deaths.ravel(), grid.exposures.ravel()
    x = np.log((d + 0.5) / (n - d + 0.5))
    hyper = GMRFHyper(1.0, 1.0, 0.0)
    b, _ = b_conditional(x, hyper, lattice)
    qa, qy = lattice.quad_forms(x - lattice.mean(b))
    tau = lattice.rank / max(qa + qy, 1e-8)
    return x, GMRFHyper(tau, 1.0, b)


def run_chain_gmrf(grid: MortalityGrid, config: GMRFConfig = GMRFConfig(),
                   progress: Callable[[int], None] | None = None) -> PosteriorDraws:
    started = time.perf_counter()
    rng = make_rng(config.seed)
    lattice = Lattice(*grid.shape)
    d, n = grid.deaths.ravel(), grid.exposures.ravel()

    def loglik_fn(v):
        return _loglik(v, d, n), _grad(v, d, n)

    x, hyper = initial_state(grid, lattice)
    current = loglik_fn(x)
    if config.initial_delta is None:
        curvature = n * expit(x) * (1.0 - expit(x))
        log_delta = -math.log(float(np.max(curvature)) + 1.0)
    else:
        log_delta = math.log(config.initial_delta)
    log_rho_step = math.log(0.3)

    n_keep = (config.iterations - config.burnin) // config.thin
    xs = np.empty((n_keep, lattice.size))
    taus, rhos, bs = np.empty(n_keep), np.empty(n_keep), np.empty(n_keep)
    kept_iters = np.empty(n_keep, dtype=int)
    acc_x = acc_rho = 0
    k = 0
    for it in range(1, config.iterations + 1):
        delta = math.exp(log_delta)
        step = auxiliary_step(x, current, loglik_fn, lattice.factor(hyper, 2.0 / delta),
                              lattice.matvec(hyper, lattice.mean(hyper.b)), delta, rng)
        x, current = step.x, (step.loglik, step.grad)
        hyper, rho_acc = update_hyper_gmrf(x, hyper, lattice, rng, config.prior, math.exp(log_rho_step))
        if it <= config.burnin:
            log_delta = robbins_monro_adapt(log_delta, float(step.accepted), config.delta_target, it)
            log_rho_step = robbins_monro_adapt(log_rho_step, float(rho_acc), config.rho_target, it)
        else:
            acc_x += step.accepted
            acc_rho += rho_acc
            if (it - config.burnin) % config.thin == 0:
                xs[k], taus[k], rhos[k], bs[k] = x, hyper.tau, hyper.rho_age, hyper.b
                kept_iters[k] = it
                k += 1
        if progress is not None:
            progress(it)

    n_post = config.iterations - config.burnin
    diag = ChainDiagnostics(n_draws=n_keep)
    diag.acceptance = {"x": acc_x / n_post, "rho_age": acc_rho / n_post}
    diag.tuning = {"delta": math.exp(log_delta), "rho_step": math.exp(log_rho_step)}
    params = {
        "x": xs.reshape(n_keep, *grid.shape),
        "tau": taus, "rho_age": rhos, "b": bs,
    }
    if n_keep >= 10:
        for name in ("tau", "rho_age", "b"):
            diag.add_ess(name, params[name])
        for i, age in enumerate(grid.ages):
            for j, year in enumerate(grid.years):
                diag.add_ess(f"x[{age}:{year}]", params["x"][:, i, j])
    diag.wall_time = time.perf_counter() - started
    diagnostics = diag.as_dict()
    diagnostics["seed"] = config.seed
    diagnostics["iterations"] = config.iterations
    diagnostics["burnin"] = config.burnin
    diagnostics["thin"] = config.thin
    return PosteriorDraws("gmrf", grid.ages, grid.years, kept_iters, params, diagnostics, grid.sex)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

class FutureConditional:
    """Gaussian law of the next ``k`` years given the observed surface.

    Built from the joint precision on ``n_ages x (T + k)``, partitioned into
    observed (years 1..T) and future (T+1..T+k) blocks.
    """

    def __init__(self, n_ages: int, n_years: int, k: int):
        if k < 1:
            raise ValidationError("forecast horizon k must be at least 1")
        self.n_ages, self.n_years, self.k = n_ages, n_years, k
        joint = Lattice(n_ages, n_years + k)
        year_idx = np.tile(np.arange(n_years + k), n_ages)
        obs = np.flatnonzero(year_idx < n_years)
        fut = np.flatnonzero(year_idx >= n_years)
        self.ka_ff = joint.k_age[fut][:, fut]
        self.ky_ff = joint.k_year[fut][:, fut]
        self.ka_fo = joint.k_age[fut][:, obs]
        self.ky_fo = joint.k_year[fut][:, obs]
        self.steps_o = joint.steps[obs]
        self.steps_f = joint.steps[fut]
        self.perm = _ordering(n_ages, k)
        pattern = self.ka_ff + self.ky_ff + sparse.identity(fut.size)
        bw = upper_band(pattern, self.perm).shape[0] - 1
        self._band_a = upper_band(self.ka_ff, self.perm, bw)
        self._band_y = upper_band(self.ky_ff, self.perm, bw)

    def precision_ff(self, hyper: GMRFHyper) -> sparse.csr_matrix:
        return (hyper.tau * (hyper.rho_age * self.ka_ff + hyper.rho_year * self.ky_ff)).tocsr()

    def factor(self, hyper: GMRFHyper) -> BandedSPD:
        ab = hyper.tau * (hyper.rho_age * self._band_a + hyper.rho_year * self._band_y)
        return BandedSPD(ab, self.perm)

    def conditional_mean(self, x_obs, hyper: GMRFHyper, factor: BandedSPD | None = None) -> np.ndarray:
        factor = factor or self.factor(hyper)
        dev = np.ravel(x_obs) - hyper.b * self.steps_o
        q_fo_dev = hyper.tau * (hyper.rho_age * (self.ka_fo @ dev) + hyper.rho_year * (self.ky_fo @ dev))
        return hyper.b * self.steps_f - factor.solve(q_fo_dev)

    def conditional_cov(self, hyper: GMRFHyper) -> np.ndarray:
        """Dense conditional covariance; only sensible for small lattices."""
        return np.linalg.inv(self.precision_ff(hyper).toarray())

    def sample(self, x_obs, hyper: GMRFHyper, rng: np.random.Generator) -> np.ndarray:
        """A draw of the future surface, shape (n_ages, k)."""
        factor = self.factor(hyper)
        draw = self.conditional_mean(x_obs, hyper, factor) + factor.noise(rng)
        return draw.reshape(self.n_ages, self.k)


def predict_gmrf(draws: PosteriorDraws, k: int, rng: np.random.Generator) -> ForecastSet:
    """Posterior-predictive death probabilities for horizons 1..k."""
    if draws.model != "gmrf":
        raise ValidationError("predict_gmrf needs GMRF draws")
    n_ages, n_years = draws.ages.size, draws.years.size
    cond = FutureConditional(n_ages, n_years, k)
    out = np.empty((k, n_ages, draws.n_draws))
    for m in range(draws.n_draws):
        hyper = GMRFHyper(draws.params["tau"][m], draws.params["rho_age"][m], draws.params["b"][m])
        out[:, :, m] = expit(cond.sample(draws.params["x"][m], hyper, rng)).T
    return ForecastSet("gmrf", draws.ages, np.arange(1, k + 1), out, int(draws.years[-1]),
                       {"n_draws": draws.n_draws, "training_years": [int(draws.years[0]), int(draws.years[-1])]})
