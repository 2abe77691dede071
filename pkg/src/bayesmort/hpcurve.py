"""Static Heligman-Pollard law on a transformed, unconstrained parameter vector.

The odds of death at age ``z`` are::

    K(z) = A^((z+B)^C) + D exp(-E (log z - log F)^2) + G H^z

and ``p = K / (1 + K)``. The state vector ``psi`` holds transformed
parameters: logit for A, B, C, D, G; log for E, H; and the scaled logit
``log((F-10)/(40-F))`` for F. The accident-hump term is taken to be 0 at
``z = 0`` (its limit from the right).
"""

from __future__ import annotations

import warnings
from dataclasses import astuple, dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from .errors import DataError, NumericalError, ValidationError

PARAM_NAMES = ("A", "B", "C", "D", "E", "F", "G", "H")
N_PARAMS = 8
F_LOW, F_HIGH = 10.0, 40.0

_LOGIT = (0, 1, 2, 3, 6)
_LOG = (4, 7)
_F = 5


@dataclass(frozen=True)
class TruncationBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != (N_PARAMS,) or hi.shape != (N_PARAMS,):
            raise ValidationError("truncation bounds must have 8 entries")
        if not np.all(lo < hi):
            raise ValidationError("truncation box needs lower < upper componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, psi) -> bool:
        psi = np.asarray(psi)
        return bool(np.all((psi >= self.lower) & (psi <= self.upper)))

    def clip(self, psi) -> np.ndarray:
        return np.clip(psi, self.lower, self.upper)


# 1% and 99% prior percentiles of the transformed parameters
DEFAULT_BOX = TruncationBox(
    lower=np.array([-10.61, -10.61, -5.99, -11.29, -25.33, -np.inf, -17.5, -1.39]),
    upper=np.array([-2.75, -0.2, 2.2, -3.48, 4.09, 2.64, -3.48, 0.18]),
)


@dataclass(frozen=True)
class HPNatural:
    A: float
    B: float
    C: float
    D: float
    E: float
    F: float
    G: float
    H: float

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "G"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name}={v} must lie in (0, 1)")
        for name in ("E", "H"):
            v = getattr(self, name)
            if not 0.0 < v < np.inf:
                raise ValidationError(f"{name}={v} must lie in (0, inf)")
        if not F_LOW < self.F < F_HIGH:
            raise ValidationError(f"F={self.F} must lie in (10, 40)")


def transform(p: HPNatural) -> np.ndarray:
    v = np.array(astuple(p), dtype=float)
    psi = np.empty(N_PARAMS)
    psi[list(_LOGIT)] = logit(v[list(_LOGIT)])
    psi[list(_LOG)] = np.log(v[list(_LOG)])
    psi[_F] = np.log((v[_F] - F_LOW) / (F_HIGH - v[_F]))
    return psi


def natural(psi) -> np.ndarray:
    """Natural parameters A..H as an array with the same leading shape as ``psi``."""
    psi = np.asarray(psi, dtype=float)
    out = np.empty_like(psi)
    out[..., _LOGIT] = expit(psi[..., _LOGIT])
    out[..., _LOG] = np.exp(psi[..., _LOG])
    out[..., _F] = F_LOW + (F_HIGH - F_LOW) * expit(psi[..., _F])
    return out


def inverse_transform(psi) -> HPNatural:
    return HPNatural(*(float(v) for v in natural(psi)))


DEFAULT_START = transform(HPNatural(A=5e-4, B=0.01, C=0.1, D=1e-3, E=10.0, F=20.0, G=5e-5, H=1.1))


def _terms(ages, psi):
    """The three additive odds components, broadcast as psi[..., None] x ages."""
    z = np.asarray(ages, dtype=float)
    psi = np.asarray(psi, dtype=float)
    nat = natural(psi)[..., None, :]
    a_, b_, c_, d_, e_, f_, g_, _ = (nat[..., k] for k in range(N_PARAMS))
    log_a = -np.logaddexp(0.0, -psi[..., None, 0])
    expo = (z + b_) ** c_
    child = np.exp(expo * log_a)
    with np.errstate(divide="ignore"):
        dev = np.where(z > 0, np.log(np.where(z > 0, z, 1.0)) - np.log(f_), 0.0)
    hump = np.where(z > 0, d_ * np.exp(-e_ * dev ** 2), 0.0)
    senescent = g_ * np.exp(z * psi[..., None, 7])
    return child, hump, senescent, expo, log_a, dev, nat


def hp_odds(ages, psi) -> np.ndarray:
    """Odds ``K(z, psi)``; shape ``psi.shape[:-1] + ages.shape``."""
    child, hump, senescent, *_ = _terms(ages, psi)
    return child + hump + senescent


def hp_prob(ages, psi) -> np.ndarray:
    k = hp_odds(ages, psi)
    return k / (1.0 + k)


def odds_jacobian(ages, psi) -> tuple[np.ndarray, np.ndarray]:
    """``K`` (n_ages,) and ``dK/dpsi`` (n_ages, 8) for a single state vector."""
    z = np.asarray(ages, dtype=float)
    child, hump, senescent, expo, log_a, dev, nat = _terms(z, psi)
    child, hump, senescent, expo, log_a, dev = (np.broadcast_to(v, z.shape) for v in
                                               (child, hump, senescent, expo, log_a, dev))
    a_, b_, c_, d_, e_, f_, g_, _ = nat[0]
    jac = np.empty((z.size, N_PARAMS))
    jac[:, 0] = child * expo * (1.0 - a_)
    jac[:, 1] = child * log_a * expo * c_ / (z + b_) * b_ * (1.0 - b_)
    jac[:, 2] = child * log_a * expo * np.log(z + b_) * c_ * (1.0 - c_)
    jac[:, 3] = hump * (1.0 - d_)
    jac[:, 4] = -hump * dev ** 2 * e_
    jac[:, 5] = hump * 2.0 * e_ * dev / f_ * (f_ - F_LOW) * (F_HIGH - f_) / (F_HIGH - F_LOW)
    jac[:, 6] = senescent * (1.0 - g_)
    jac[:, 7] = senescent * z
    return child + hump + senescent, jac


def year_loglik(psi, deaths, exposures, ages) -> float:
    """Binomial log-likelihood kernel ``sum d log K - n log(1+K)`` for one year.

    Accepts ``psi`` with leading batch dimensions; the binomial coefficient is
    omitted.
    """
    k = hp_odds(ages, psi)
    return np.sum(deaths * np.log(k) - exposures * np.log1p(k), axis=-1)


def year_loglik_grad(psi, deaths, exposures, ages) -> np.ndarray:
    k, jac = odds_jacobian(ages, psi)
    return (np.asarray(deaths) / k - np.asarray(exposures) / (1.0 + k)) @ jac


# ---------------------------------------------------------------------------
# weighted least squares
# ---------------------------------------------------------------------------

@dataclass
class WLSResult:
    mean: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    objective: float
    history: list

    @property
    def flagged(self) -> bool:
        return not self.converged


def _spd_repair(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mat + jitter I, cholesky factor)``; jitter doubles 1e-10 -> 1e-4 of trace/8."""
    mat = 0.5 * (mat + mat.T)
    scale = np.trace(mat) / mat.shape[0]
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalError(f"{what} has non-positive or non-finite trace")
    jitter = 0.0
    while True:
        try:
            trial = mat + jitter * scale * np.eye(mat.shape[0])
            return trial, linalg.cholesky(trial, lower=True)
        except linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else 2.0 * jitter
            if jitter > 1e-4:
                raise NumericalError(f"{what} is not positive definite even after jitter") from None


def wls_fit(rates, ages, exposures=None, start=None, box: TruncationBox = DEFAULT_BOX,
            max_iter: int = 500, gtol: float = 1e-8) -> WLSResult:
    """Fit one year's curve by weighted least squares with weights ``1/q^2``.

    Minimizes ``sum_z w_z (q_z - p(z, psi))^2`` over the truncation box by
    projected Levenberg-Marquardt. Zero rates get weight from
    ``max(q, 0.5/n)``, which needs ``exposures``. ``cov`` is the Gauss-Newton
    covariance ``(J'WJ)^{-1}`` times the weighted residual mean square.
    """
    q = np.asarray(rates, dtype=float)
    ages = np.asarray(ages, dtype=float)
    if q.shape != ages.shape:
        raise ValidationError("rates and ages must have the same shape")
    if np.any(q < 0) or np.any(q >= 1) or not np.all(np.isfinite(q)):
        raise DataError("empirical rates must lie in [0, 1)")
    if np.any(q == 0):
        if exposures is None:
            raise ValidationError("zero rates require exposures for the continuity correction")
        q_weight = np.maximum(q, 0.5 / np.asarray(exposures, dtype=float))
    else:
        q_weight = q
    sqrt_w = 1.0 / q_weight

    def residuals(psi):
        return sqrt_w * (q - hp_prob(ages, psi))

    def jacobian(psi):
        k, dk = odds_jacobian(ages, psi)
        return -(sqrt_w / (1.0 + k) ** 2)[:, None] * dk

    psi = box.clip(DEFAULT_START if start is None else np.asarray(start, dtype=float))
    r = residuals(psi)
    obj = float(r @ r)
    jac = jacobian(psi)
    history = [obj]
    jtj = jac.T @ jac
    lam = 1e-3 * float(np.max(np.diag(jtj))) if np.max(np.diag(jtj)) > 0 else 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = jac.T @ r
        # gradients pushing against an active bound do not count
        active = ((psi <= box.lower) & (grad > 0)) | ((psi >= box.upper) & (grad < 0))
        pgrad = np.where(active, 0.0, grad)
        if np.linalg.norm(pgrad) < gtol:
            converged = True
            break
        diag = np.maximum(np.diag(jtj), 1e-12 * max(1.0, float(np.max(np.diag(jtj)))))
        improved = False
        while lam < 1e20:
            try:
                # damping plus the descent check below make ill-conditioned solves harmless
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", linalg.LinAlgWarning)
                    step = linalg.solve(jtj + lam * np.diag(diag), -grad, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                lam *= 4.0
                continue
            cand = box.clip(psi + step)
            r_new = residuals(cand)
            obj_new = float(r_new @ r_new)
            if np.isfinite(obj_new) and obj_new < obj:
                improved = True
                break
            lam *= 4.0
        if not improved:
            # no descent direction left at machine precision
            converged = True
            break
        moved = np.linalg.norm(cand - psi)
        rel_drop = (obj - obj_new) / max(obj, 1e-300)
        psi, r, obj = cand, r_new, obj_new
        jac = jacobian(psi)
        jtj = jac.T @ jac
        history.append(obj)
        lam = max(lam / 3.0, 1e-15)
        if moved < 1e-12 * (np.linalg.norm(psi) + 1e-12) or rel_drop < 1e-15:
            converged = True
            break

    n_free = max(ages.size - N_PARAMS, 1)
    s2 = max(obj / n_free, np.finfo(float).eps)
    jtj_spd, chol = _spd_repair(jtj, "J'WJ")
    cov = s2 * linalg.cho_solve((chol, True), np.eye(N_PARAMS))
    cov, _ = _spd_repair(cov, "WLS covariance")
    return WLSResult(mean=psi, cov=cov, converged=converged, iterations=it,
                     objective=obj, history=history)
