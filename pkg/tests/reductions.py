"""One-dimensional reductions of the samplers, shared by unit and acceptance tests.

Each function runs a sampler on a target whose law is a single scalar and
returns the retained draws together with a quadrature CDF of that law.
"""

import math

import numpy as np
from scipy import sparse, stats
from scipy.special import expit

from bayesmort.gmrf import auxiliary_step, proposal_factor
from bayesmort.hpcurve import DEFAULT_BOX, year_loglik
from bayesmort.hpdyn import HPProposalPlan, RWHyper, update_state_block
from bayesmort.samplers import make_rng
from bayesmort.synthetic import TYPICAL_STEP_SD

from oracles import grid_cdf


def one_cell_aux_chain(n_keep=20_000, thin=5, delta=0.6, seed=3):
    """Auxiliary-gradient kernel on one cell: N(m, s^2) prior times binomial data."""
    m, s, d, n = -2.0, 0.8, 4.0, 60.0

    def log_post(v):
        return -0.5 * (v - m) ** 2 / s ** 2 + d * v - n * np.logaddexp(0, v)

    def lik(v):
        return float(d * v[0] - n * np.logaddexp(0, v[0])), np.array([d - n * expit(v[0])])

    factor = proposal_factor(sparse.csr_matrix([[1 / s ** 2]]), delta)
    rng = make_rng(seed)
    x = np.array([m])
    cur = lik(x)
    out = np.empty(n_keep)
    for it in range(n_keep * thin):
        step = auxiliary_step(x, cur, lik, factor, np.array([m / s ** 2]), delta, rng)
        x, cur = step.x, (step.loglik, step.grad)
        if it % thin == thin - 1:
            out[it // thin] = x[0]
    xs, cdf = grid_cdf(log_post, -8, 3)
    return out, xs, cdf


def _one_free_setup(grid, psi, i):
    plan = HPProposalPlan.from_grid(grid)
    # start at the interior truth with both years equal, so the frozen
    # coordinates and the transition centre agree with the likelihood
    path = np.stack([psi[1], psi[1]])
    plan.means[1] = path[1]
    h = RWHyper(np.zeros(8), np.diag(TYPICAL_STEP_SD ** 2), np.ones(8))
    v = plan.covs[1]
    cond_var = 1.0 / np.linalg.inv(v)[i, i]
    return plan, path, h, cond_var / v[i, i]


def _coordinate_cdf(grid, path, h, i, half_width):
    """Quadrature CDF of psi[1, i] with the other coordinates and years frozen."""
    def log_density(v):
        x = path[1].copy()
        x[i] = v
        if not DEFAULT_BOX.contains(x):
            return -np.inf
        ll = float(year_loglik(x, grid.deaths[:, 1], grid.exposures[:, 1], grid.ages))
        return ll + stats.multivariate_normal(path[0] + h.mu, h.Sigma).logpdf(x)
    c = path[1, i]
    return grid_cdf(log_density, c - half_width, c + half_width, n=4001)


def hp_coordinate_chain(grid, psi, i, first_sweep=False, n_keep=20_000, thin=3, seed=None):
    """``update_state_block`` on year 1 of a two-year path with only coordinate ``i`` free."""
    plan, path, h, ratio = _one_free_setup(grid, psi, i)
    # proposal sd of about 2.4 (random walk) or 1.5 (independence) conditional sds
    plan.log_scales[:] = math.log((1.5 if first_sweep else 2.4) ** 2 * ratio)
    sd = math.sqrt(plan.covs[1][i, i] * ratio)
    xs, cdf = _coordinate_cdf(grid, path, h, i, 12 * sd)
    rng = make_rng(10 + i if seed is None else seed)
    out = np.empty(n_keep)
    for it in range(n_keep * thin):
        path, _ = update_state_block(1, path, h, plan, grid, rng, first_sweep=first_sweep, free=[i])
        if it % thin == thin - 1:
            out[it // thin] = path[1, i]
    return out, xs, cdf
