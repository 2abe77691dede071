"""Dynamic Heligman-Pollard model: the eight transformed parameters follow a
truncated Gaussian random walk across years.

State ``psi[t]`` (``t = 0..T-1``) evolves as
``psi[t] ~ N8(psi[t-1] + mu, Sigma)`` restricted to a box, with a flat prior
on ``psi[0]`` over the box. Hyperpriors: ``mu ~ N(0, M^-1)`` with
``M = 0.001 I``; ``Sigma | alpha ~ IW(nu + 7, 2 nu diag(1/alpha))`` and
``alpha_i ~ IG(1/2, 1/l^2)`` with ``nu = 2`` and ``l = 1e5``, which makes
each standard deviation half-t and each correlation uniform marginally.

By default the normalizing constant of the truncated transition is treated
as 1, which is exact when the box is wide relative to ``Sigma``. Setting
``truncation_mc`` to a positive draw count estimates it by Monte Carlo with
fixed (common) random numbers and corrects every update that depends on it.

Year indices in this module are 0-based.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import gammaln, multigammaln

from .draws import PosteriorDraws
from .errors import NumericalError, ValidationError
from .forecast import ForecastSet
from .hpcurve import DEFAULT_BOX, N_PARAMS, PARAM_NAMES, TruncationBox, hp_prob, wls_fit, year_loglik
from .lifetable import MortalityGrid
from .samplers import (ChainDiagnostics, make_rng, rinvgamma, rinvwishart, robbins_monro_adapt,
                       rtmvnorm_gibbs)

log = logging.getLogger(__name__)

NU = 2.0
SCALE_L = 1e5
DRIFT_PRECISION = 1e-3
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class RWHyper:
    """Drift ``mu``, innovation covariance ``Sigma`` and Huang-Wand ``alpha``."""

    mu: np.ndarray
    Sigma: np.ndarray
    alpha: np.ndarray
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.mu.shape != (N_PARAMS,) or self.alpha.shape != (N_PARAMS,):
            raise ValidationError("mu and alpha must have 8 entries")
        if self.Sigma.shape != (N_PARAMS, N_PARAMS):
            raise ValidationError("Sigma must be 8x8")
        if np.any(self.alpha <= 0):
            raise ValidationError("alpha must be positive")

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of Sigma."""
        if self._chol is None:
            try:
                self._chol = linalg.cholesky(self.Sigma, lower=True)
            except linalg.LinAlgError:
                raise NumericalError("Sigma is not positive definite") from None
        return self._chol


def _mvn_logpdf(x, mean, chol) -> np.ndarray:
    """Gaussian log-density with covariance ``chol chol'``; batches over leading axes."""
    dev = np.atleast_2d(np.asarray(x, dtype=float) - mean)
    z = linalg.solve_triangular(chol, dev.T, lower=True, check_finite=False)
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * N_PARAMS * _LOG_2PI
    return out if np.ndim(x) > 1 else float(out[0])


def hyper_log_prior(hyper: RWHyper) -> float:
    p = N_PARAMS
    lp = -0.5 * p * _LOG_2PI + 0.5 * p * math.log(DRIFT_PRECISION)
    lp -= 0.5 * DRIFT_PRECISION * float(hyper.mu @ hyper.mu)
    df = NU + p - 1
    scale_diag = 2.0 * NU / hyper.alpha
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(hyper.chol))))
    sigma_inv = linalg.cho_solve((hyper.chol, True), np.eye(p))
    lp += (0.5 * df * float(np.sum(np.log(scale_diag))) - 0.5 * df * p * math.log(2.0)
           - multigammaln(0.5 * df, p) - 0.5 * (df + p + 1) * logdet_sigma
           - 0.5 * float(scale_diag @ np.diag(sigma_inv)))
    a, b = 0.5, SCALE_L ** -2
    lp += float(np.sum(a * math.log(b) - gammaln(a) - (a + 1) * np.log(hyper.alpha) - b / hyper.alpha))
    return lp


# ---------------------------------------------------------------------------
# truncation normalizer
# ---------------------------------------------------------------------------

class TruncationMC:
    """Monte Carlo estimate of ``P(N(m, Sigma) in box)`` with fixed normals.

    Reusing the same standard-normal draws for every evaluation makes the
    estimate a smooth-ish deterministic function of ``(m, Sigma)``, so MH
    ratios built from it do not pick up fresh noise at every step.
    """

    def __init__(self, n_draws: int, box: TruncationBox, seed: int = 0):
        if n_draws < 1:
            raise ValidationError("truncation_mc needs at least one draw")
        self.box = box
        self.z = make_rng(seed).standard_normal((n_draws, N_PARAMS))
        self.floor = 0.5 / n_draws

    def log_z(self, means, chol) -> np.ndarray:
        means = np.atleast_2d(means)
        pts = means[:, None, :] + (self.z @ chol.T)[None, :, :]
        inside = np.all((pts >= self.box.lower) & (pts <= self.box.upper), axis=-1)
        return np.log(np.maximum(inside.mean(axis=1), self.floor))


def _transition_terms(path, hyper: RWHyper, trunc: TruncationMC | None) -> float:
    if path.shape[0] < 2:
        return 0.0
    prev = path[:-1] + hyper.mu
    total = float(np.sum(_mvn_logpdf(path[1:], prev, hyper.chol)))
    if trunc is not None:
        total -= float(np.sum(trunc.log_z(prev, hyper.chol)))
    return total


def log_posterior(path, hyper: RWHyper, grid: MortalityGrid, box: TruncationBox = DEFAULT_BOX,
                  trunc: TruncationMC | None = None) -> float:
    """Unnormalized joint log-posterior of the state path and hyperparameters."""
    path = np.asarray(path, dtype=float)
    if path.shape != (grid.n_years, N_PARAMS):
        raise ValidationError(f"path must have shape ({grid.n_years}, 8)")
    if not box.contains(path):
        return -math.inf
    ll = float(np.sum(year_loglik(path, grid.deaths.T, grid.exposures.T, grid.ages)))
    return ll + _transition_terms(path, hyper, trunc) + hyper_log_prior(hyper)


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

@dataclass
class HPProposalPlan:
    """Per-year proposal centers ``m_t``, shapes ``V_t`` and adaptive scales ``c_t``."""

    means: np.ndarray
    covs: np.ndarray
    log_scales: np.ndarray
    flagged: list = field(default_factory=list)

    def __post_init__(self):
        self.chols = np.array([linalg.cholesky(v, lower=True) for v in self.covs])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @classmethod
    def from_grid(cls, grid: MortalityGrid, box: TruncationBox = DEFAULT_BOX,
                  initial_scale: float = 2.38 ** 2 / N_PARAMS) -> "HPProposalPlan":
        """Seed each year from a WLS fit.

        Each year is fitted from the default start and, when available, from
        the previous year's estimate; the lower objective wins. A year where
        every fit raises falls back to the nearest successful year.
        """
        means, covs, ok, flagged = [], [], [], []
        start = None
        for t, year in enumerate(grid.years):
            fits, errors = [], []
            for init in ([None] if start is None else [start, None]):
                try:
                    fits.append(wls_fit(grid.rates[:, t], grid.ages, grid.exposures[:, t],
                                        start=init, box=box))
                except (NumericalError, ValueError) as exc:
                    errors.append(exc)
            if fits:
                res = min(fits, key=lambda r: r.objective)
            else:
                log.warning("WLS seeding failed for %s: %s", year, errors[-1])
                means.append(None)
                covs.append(None)
                ok.append(False)
                continue
            if res.flagged:
                flagged.append(int(year))
            means.append(res.mean)
            covs.append(res.cov)
            ok.append(True)
            start = res.mean
        good = np.flatnonzero(ok)
        if not good.size:
            raise ValidationError("WLS seeding failed for every year; check the grid")
        for t in np.flatnonzero(~np.asarray(ok)):
            src = good[np.argmin(np.abs(good - t))]
            means[t], covs[t] = means[src], covs[src]
        covs = np.array([_box_regularized(v, box) for v in covs])
        return cls(np.array(means), covs, np.full(grid.n_years, math.log(initial_scale)), flagged)

    @classmethod
    def isotropic(cls, grid: MortalityGrid, centers, initial_scale: float = 1e-4) -> "HPProposalPlan":
        """Plain random-walk baseline: identity shapes, same adaptive scale rule."""
        t = grid.n_years
        return cls(np.asarray(centers, dtype=float), np.tile(np.eye(N_PARAMS), (t, 1, 1)),
                   np.full(t, math.log(initial_scale)))


def _box_regularized(cov, box: TruncationBox) -> np.ndarray:
    """Add a N(0, (w/2)^2) precision per coordinate, ``w`` the box width.

    Where the data pin a coordinate down this leaves ``cov`` essentially
    unchanged; where they do not (ages outside the span of a curve
    component) it stops the proposal from stepping far beyond the box.
    Infinite widths use the largest finite width.
    """
    width = box.upper - box.lower
    width = np.where(np.isfinite(width), width, width[np.isfinite(width)].max())
    prec = linalg.inv(cov) + np.diag(4.0 / width ** 2)
    out = linalg.inv(prec)
    return (out + out.T) / 2


def block_log_target(t: int, psi_t, path, hyper: RWHyper, grid: MortalityGrid,
                     box: TruncationBox = DEFAULT_BOX, trunc: TruncationMC | None = None) -> float:
    """Log full conditional of ``psi[t]`` up to a constant."""
    if not box.contains(psi_t):
        return -math.inf
    lp = float(year_loglik(psi_t, grid.deaths[:, t], grid.exposures[:, t], grid.ages))
    if t > 0:
        lp += _mvn_logpdf(psi_t, path[t - 1] + hyper.mu, hyper.chol)
    if t < path.shape[0] - 1:
        lp += _mvn_logpdf(path[t + 1], psi_t + hyper.mu, hyper.chol)
        if trunc is not None:
            lp -= float(trunc.log_z(psi_t + hyper.mu, hyper.chol)[0])
    return lp


def update_state_block(t: int, path, hyper: RWHyper, plan: HPProposalPlan, grid: MortalityGrid,
                       rng: np.random.Generator, first_sweep: bool = False, free=None,
                       box: TruncationBox = DEFAULT_BOX,
                       trunc: TruncationMC | None = None) -> tuple[np.ndarray, bool]:
    """One Metropolis-Hastings update of ``psi[t]``.

    The proposal is ``N(m_t, c_t V_t)`` on the first sweep (independence,
    with the matching density correction) and ``N(psi[t], c_t V_t)``
    afterwards. ``free`` restricts the move to a subset of coordinates,
    using the corresponding sub-block of ``V_t``; the rest stay fixed.
    Returns the (possibly unchanged) path and the acceptance flag.
    """
    if not 0 <= t < path.shape[0]:
        raise ValidationError(f"year index {t} out of range")
    current = path[t]
    idx = np.arange(N_PARAMS) if free is None else np.atleast_1d(np.asarray(free))
    c = plan.scales[t]
    if free is None:
        chol = plan.chols[t]
    else:
        chol = linalg.cholesky(plan.covs[t][np.ix_(idx, idx)], lower=True)
    chol = math.sqrt(c) * chol
    center = plan.means[t][idx] if first_sweep else current[idx]
    proposal = current.copy()
    proposal[idx] = center + chol @ rng.standard_normal(idx.size)
    if not box.contains(proposal):
        return path, False
    log_ratio = (block_log_target(t, proposal, path, hyper, grid, box, trunc)
                 - block_log_target(t, current, path, hyper, grid, box, trunc))
    if first_sweep:
        m = plan.means[t][idx]
        log_ratio += _gauss_kernel(current[idx], m, chol) - _gauss_kernel(proposal[idx], m, chol)
    if math.log(rng.random()) < log_ratio:
        path = path.copy()
        path[t] = proposal
        return path, True
    return path, False


def _gauss_kernel(x, mean, chol) -> float:
    z = linalg.solve_triangular(chol, x - mean, lower=True, check_finite=False)
    return -0.5 * float(z @ z)


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------

def _mu_conditional(deltas, sigma):
    """Mean and covariance square root of ``mu`` given the increments.

    The precision is ``eps I + n Sigma^-1``; in the eigenbasis of ``Sigma``
    both moments are diagonal, so ``Sigma^-1`` is never formed.
    """
    n = deltas.shape[0]
    lam, u = linalg.eigh(sigma)
    lam = np.maximum(lam, 0.0)
    denom = DRIFT_PRECISION * lam + n
    mean = u @ ((u.T @ deltas.sum(axis=0)) / denom) if n else np.zeros(N_PARAMS)
    root = u * np.sqrt(np.divide(lam, denom, out=np.full_like(lam, 1.0 / DRIFT_PRECISION),
                                 where=denom > 0))
    return mean, root


def _draw_gaussian(mean, root, rng):
    return mean + root @ rng.standard_normal(mean.size)


def _draw_sigma(deltas, mu, alpha, rng):
    resid = deltas - mu
    scale = np.diag(2.0 * NU / alpha) + resid.T @ resid
    df = NU + N_PARAMS - 1 + deltas.shape[0]
    for _ in range(10):
        sigma = rinvwishart(df, scale, rng)
        try:
            linalg.cholesky(sigma, lower=True)
            return sigma
        except linalg.LinAlgError:
            continue
    raise NumericalError("inverse-Wishart draws for Sigma kept failing to be positive definite")


def update_hypers(path, hyper: RWHyper, rng: np.random.Generator,
                  trunc: TruncationMC | None = None) -> RWHyper:
    """Gibbs sweep over ``mu``, ``Sigma`` and ``alpha`` given the path.

    With one year there are no increments and the draws come from the
    priors. With ``trunc`` the conditional draws for ``mu`` and ``Sigma``
    become independence proposals accepted with probability
    ``prod Z_old / Z_new``.
    """
    path = np.asarray(path, dtype=float)
    deltas = np.diff(path, axis=0)
    prev = path[:-1]
    mean, root = _mu_conditional(deltas, hyper.Sigma)
    mu = _draw_gaussian(mean, root, rng)
    if trunc is not None and deltas.shape[0]:
        old = trunc.log_z(prev + hyper.mu, hyper.chol).sum()
        new = trunc.log_z(prev + mu, hyper.chol).sum()
        if math.log(rng.random()) >= old - new:
            mu = hyper.mu
    hyper = RWHyper(mu, hyper.Sigma, hyper.alpha, hyper._chol)

    sigma = _draw_sigma(deltas, hyper.mu, hyper.alpha, rng)
    cand = RWHyper(hyper.mu, sigma, hyper.alpha)
    if trunc is not None and deltas.shape[0]:
        old = trunc.log_z(prev + hyper.mu, hyper.chol).sum()
        new = trunc.log_z(prev + hyper.mu, cand.chol).sum()
        if math.log(rng.random()) >= old - new:
            cand = hyper
    hyper = cand

    sigma_inv = linalg.cho_solve((hyper.chol, True), np.eye(N_PARAMS))
    rate = NU * np.diag(sigma_inv) + SCALE_L ** -2
    alpha = rinvgamma(np.full(N_PARAMS, 0.5 * (NU + N_PARAMS)), rate, rng)
    return RWHyper(hyper.mu, hyper.Sigma, alpha, hyper._chol)


# ---------------------------------------------------------------------------
# the chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HPConfig:
    iterations: int = 60000
    burnin: int = 20000
    thin: int = 10
    seed: int = 0
    accept_target: float = 0.25
    proposal: str = "wls"          # "wls" or "rw" (isotropic random-walk baseline)
    truncation_mc: int = 0         # 0: treat transition normalizers as 1
    box: TruncationBox = DEFAULT_BOX

    def __post_init__(self):
        if self.proposal not in ("wls", "rw"):
            raise ValidationError("proposal must be 'wls' or 'rw'")
        if not 0 <= self.burnin < self.iterations:
            raise ValidationError("need 0 <= burnin < iterations")
        if self.thin < 1:
            raise ValidationError("thin must be positive")
        if not 0 < self.accept_target < 1:
            raise ValidationError("accept_target must lie in (0, 1)")


def initial_hyper(path) -> RWHyper:
    path = np.asarray(path)
    if path.shape[0] > 2:
        deltas = np.diff(path, axis=0)
        mu = deltas.mean(axis=0)
        var = np.maximum(deltas.var(axis=0), 1e-4)
    else:
        mu, var = np.zeros(N_PARAMS), np.full(N_PARAMS, 0.01)
    return RWHyper(mu, np.diag(var), np.ones(N_PARAMS))


def run_chain(grid: MortalityGrid, config: HPConfig = HPConfig(),
              progress: Callable[[int], None] | None = None) -> PosteriorDraws:
    """Metropolis-within-Gibbs over the path and hyperparameters."""
    started = time.perf_counter()
    rng = make_rng(config.seed)
    box = config.box
    wls_plan = HPProposalPlan.from_grid(grid, box)
    if config.proposal == "wls":
        plan = wls_plan
    else:
        plan = HPProposalPlan.isotropic(grid, wls_plan.means)
    trunc = TruncationMC(config.truncation_mc, box, config.seed + 1) if config.truncation_mc else None
    path = box.clip(wls_plan.means.copy())
    hyper = initial_hyper(path)
    n_years = grid.n_years

    n_keep = (config.iterations - config.burnin) // config.thin
    psis = np.empty((n_keep, n_years, N_PARAMS))
    mus, alphas = np.empty((n_keep, N_PARAMS)), np.empty((n_keep, N_PARAMS))
    sigmas = np.empty((n_keep, N_PARAMS, N_PARAMS))
    kept_iters = np.empty(n_keep, dtype=int)
    accepted = np.zeros(n_years)
    k = 0
    for it in range(1, config.iterations + 1):
        first = it == 1 and config.proposal == "wls"
        for t in range(n_years):
            path, acc = update_state_block(t, path, hyper, plan, grid, rng, first, None, box, trunc)
            if it <= config.burnin:
                plan.log_scales[t] = robbins_monro_adapt(plan.log_scales[t], float(acc),
                                                         config.accept_target, it)
            else:
                accepted[t] += acc
        hyper = update_hypers(path, hyper, rng, trunc)
        if it > config.burnin and (it - config.burnin) % config.thin == 0:
            psis[k], mus[k], sigmas[k], alphas[k] = path, hyper.mu, hyper.Sigma, hyper.alpha
            kept_iters[k] = it
            k += 1
        if progress is not None:
            progress(it)

    n_post = config.iterations - config.burnin
    stuck = [int(y) for t, y in enumerate(grid.years) if accepted[t] < 0.01 * n_post]
    if stuck:
        log.warning("psi barely moved after burn-in for years %s; the age range may not identify "
                    "all eight curve parameters", stuck)
    diag = ChainDiagnostics(n_draws=n_keep)
    diag.acceptance = {f"psi[{y}]": accepted[t] / n_post for t, y in enumerate(grid.years)}
    diag.tuning = {f"c[{y}]": float(plan.scales[t]) for t, y in enumerate(grid.years)}
    if n_keep >= 10:
        for t, year in enumerate(grid.years):
            for i, name in enumerate(PARAM_NAMES):
                diag.add_ess(f"{name}[{year}]", psis[:, t, i])
        for i, name in enumerate(PARAM_NAMES):
            diag.add_ess(f"mu[{name}]", mus[:, i])
    diag.wall_time = time.perf_counter() - started
    diagnostics = diag.as_dict()
    diagnostics.update(seed=config.seed, iterations=config.iterations, burnin=config.burnin,
                       thin=config.thin, proposal=config.proposal,
                       truncation_mc=config.truncation_mc, wls_flagged_years=wls_plan.flagged)
    params = {"psi": psis, "mu": mus, "Sigma": sigmas, "alpha": alphas}
    return PosteriorDraws("hp", grid.ages, grid.years, kept_iters, params, diagnostics, grid.sex)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def draw_truncated_step(mean, chol, box: TruncationBox, rng: np.random.Generator,
                        max_tries: int = 100, sweeps: int = 10) -> np.ndarray:
    """One draw of the truncated Gaussian step.

    Plain rejection is exact and usually succeeds at once; if it keeps
    failing the draw falls back to Gibbs sweeps, which are approximate.
    """
    for _ in range(max_tries):
        cand = mean + chol @ rng.standard_normal(N_PARAMS)
        if box.contains(cand):
            return cand
    return rtmvnorm_gibbs(mean, chol @ chol.T, box.lower, box.upper, sweeps, rng)


def predict_forward(draws: PosteriorDraws, k: int, rng: np.random.Generator,
                    box: TruncationBox = DEFAULT_BOX, ages=None) -> ForecastSet:
    """Posterior-predictive death probabilities for horizons 1..k."""
    if draws.model != "hp":
        raise ValidationError("predict_forward needs HP draws")
    if k < 1:
        raise ValidationError("forecast horizon k must be at least 1")
    ages = draws.ages if ages is None else np.asarray(ages)
    out = np.empty((k, ages.size, draws.n_draws))
    for m in range(draws.n_draws):
        mu = draws.params["mu"][m]
        chol = linalg.cholesky(draws.params["Sigma"][m], lower=True)
        psi = draws.params["psi"][m, -1]
        for h in range(k):
            psi = draw_truncated_step(psi + mu, chol, box, rng)
            out[h, :, m] = hp_prob(ages, psi)
    out = np.clip(out, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return ForecastSet("hp", ages, np.arange(1, k + 1), out, int(draws.years[-1]),
                       {"n_draws": draws.n_draws,
                        "training_years": [int(draws.years[0]), int(draws.years[-1])]})


def fitted_probabilities(draws: PosteriorDraws, ages=None) -> np.ndarray:
    """In-sample death probabilities per draw, shape (n_ages, T, M)."""
    ages = draws.ages if ages is None else np.asarray(ages)
    return np.transpose(hp_prob(ages, draws.params["psi"]), (2, 1, 0))


__all__ = [
    "RWHyper", "HPProposalPlan", "HPConfig", "TruncationMC", "log_posterior", "block_log_target",
    "update_state_block", "update_hypers", "run_chain", "predict_forward", "hyper_log_prior",
    "draw_truncated_step", "fitted_probabilities",
]
