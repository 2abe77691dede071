"""Posterior-predictive summaries: intervals, means, survival and life expectancy.

All functions work draw by draw. Survival products pair the same posterior
draw across ages, so cross-age dependence is kept.

Quantiles use linear interpolation between order statistics (numpy's
``"linear"`` method, Hyndman-Fan type 7). Life tables close at the oldest
age in the forecast: survival beyond it contributes nothing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .errors import IngestionError, ValidationError

MODELS = ("hp", "gmrf", "external")


@dataclass
class ForecastSet:
    """Predictive samples of death probabilities.

    ``samples[h, a, m]`` is draw ``m`` of ``p`` at age ``ages[a]`` in year
    ``origin_year + horizons[h]``.
    """

    model: str
    ages: np.ndarray
    horizons: np.ndarray
    samples: np.ndarray
    origin_year: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValidationError(f"model tag must be one of {MODELS}")
        self.ages = np.asarray(self.ages, dtype=int)
        self.horizons = np.asarray(self.horizons, dtype=int)
        self.samples = np.asarray(self.samples, dtype=float)
        expected = (self.horizons.size, self.ages.size)
        if self.samples.ndim != 3 or self.samples.shape[:2] != expected:
            raise ValidationError(f"samples must have shape {expected} + (draws,)")
        if not np.all((self.samples > 0) & (self.samples < 1)):
            raise ValidationError("death-probability samples must lie in (0, 1)")

    @property
    def n_draws(self) -> int:
        return self.samples.shape[2]

    def _h(self, horizon) -> int:
        hits = np.flatnonzero(self.horizons == horizon)
        if not hits.size:
            raise ValidationError(f"horizon {horizon} not in forecast {self.horizons.tolist()}")
        return int(hits[0])

    def _a(self, age) -> int:
        if not self.ages[0] <= age <= self.ages[-1]:
            raise ValidationError(f"age {age} outside forecast ages {self.ages[0]}-{self.ages[-1]}")
        return int(age - self.ages[0])

    def draws(self, age, horizon) -> np.ndarray:
        return self.samples[self._h(horizon), self._a(age)]


def _tail_probs(level: float) -> tuple[float, float]:
    if not 0.0 <= level < 1.0:
        raise ValidationError(f"interval level must lie in [0, 1), got {level}")
    return (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0


def quantile_interval(samples, level: float, axis=-1):
    """Equal-tailed empirical interval; level 0 gives (median, median)."""
    lo_p, hi_p = _tail_probs(level)
    q = np.quantile(samples, [lo_p, hi_p], axis=axis, method="linear")
    return q[0], q[1]


def predictive_interval(fs: ForecastSet, age: int, horizon: int, level: float = 0.95):
    lo, hi = quantile_interval(fs.draws(age, horizon), level)
    return float(lo), float(hi)


def predictive_mean(fs: ForecastSet, age: int, horizon: int) -> float:
    return float(np.mean(fs.draws(age, horizon)))


def survival_product(p) -> np.ndarray:
    """Per-draw survival ``prod_i (1 - p[i])`` over the leading (age) axis of ``p``."""
    return np.prod(1.0 - np.asarray(p, dtype=float), axis=0)


def curtate_expectation(p) -> np.ndarray:
    """Per-draw ``sum_{s>=1} prod_{i<s} (1 - p[i])`` over the leading (age) axis of ``p``."""
    return np.cumprod(1.0 - np.asarray(p, dtype=float), axis=0).sum(axis=0)


def survival_curve(fs: ForecastSet, z: int, s: int, horizon: int) -> np.ndarray:
    """Per-draw probability that someone aged ``z`` in year T+k reaches ``z+s``."""
    if s < 1:
        raise ValidationError("survival span s must be at least 1")
    if z < fs.ages[0] or z + s - 1 > fs.ages[-1]:
        raise ValidationError(f"ages {z}..{z + s - 1} exceed forecast ages {fs.ages[0]}-{fs.ages[-1]}")
    a = fs._a(z)
    return survival_product(fs.samples[fs._h(horizon), a:a + s])


def life_expectancy(fs: ForecastSet, z: int, horizon: int) -> np.ndarray:
    """Per-draw curtate period expectation of life at age ``z`` in year T+k.

    Uses ages ``z .. omega-1``; nobody survives past the oldest forecast age.
    """
    a = fs._a(z)
    return curtate_expectation(fs.samples[fs._h(horizon), a:-1])


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------

def _level_tag(level: float) -> str:
    pct = round(100 * level, 6)
    return f"{pct:g}".replace(".", "_")


def forecast_draws_csv(fs: ForecastSet) -> str:
    out = io.StringIO()
    out.write("age,horizon,draw,p\n")
    for h, horizon in enumerate(fs.horizons):
        for a, age in enumerate(fs.ages):
            prefix = f"{age},{horizon},"
            out.write("".join(f"{prefix}{m},{v!r}\n" for m, v in enumerate(fs.samples[h, a].tolist())))
    return out.getvalue()


def forecast_from_csv(text: str, model: str = "external", origin_year: int = 0) -> ForecastSet:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["age", "horizon", "draw", "p"]:
        raise IngestionError("expected header age,horizon,draw,p")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
        except (ValueError, IndexError) as exc:
            raise IngestionError(f"line {lineno}: {exc}") from None
    ages = np.array(sorted({r[0] for r in rows}))
    horizons = np.array(sorted({r[1] for r in rows}))
    m = max(r[2] for r in rows) + 1
    samples = np.full((horizons.size, ages.size, m), np.nan)
    h_index = {h: i for i, h in enumerate(horizons)}
    for age, horizon, draw, p in rows:
        samples[h_index[horizon], age - ages[0], draw] = p
    if np.isnan(samples).any():
        raise IngestionError("forecast draw file is not rectangular")
    return ForecastSet(model, ages, horizons, samples, origin_year)


def summary_rows(fs: ForecastSet, level: float = 0.95):
    lo, hi = quantile_interval(fs.samples, level)
    mean = fs.samples.mean(axis=-1)
    for h, horizon in enumerate(fs.horizons):
        for a, age in enumerate(fs.ages):
            yield int(age), int(horizon), float(mean[h, a]), float(lo[h, a]), float(hi[h, a])


def forecast_summary_csv(fs: ForecastSet, level: float = 0.95) -> str:
    tag = _level_tag(level)
    out = io.StringIO()
    out.write(f"age,horizon,mean,lo{tag},hi{tag}\n")
    for age, horizon, mean, lo, hi in summary_rows(fs, level):
        out.write(f"{age},{horizon},{mean!r},{lo!r},{hi!r}\n")
    return out.getvalue()


def survival_summary_csv(fs: ForecastSet, s: int, level: float = 0.95) -> str:
    """Survival over ``s`` years for every age with a full span inside the forecast."""
    tag = _level_tag(level)
    out = io.StringIO()
    out.write(f"age,horizon,s,mean,lo{tag},hi{tag}\n")
    for horizon in fs.horizons:
        for z in range(int(fs.ages[0]), int(fs.ages[-1]) - s + 2):
            surv = survival_curve(fs, z, s, horizon)
            lo, hi = quantile_interval(surv, level)
            out.write(f"{z},{horizon},{s},{float(surv.mean())!r},{float(lo)!r},{float(hi)!r}\n")
    return out.getvalue()


def write_forecast(fs: ForecastSet, directory, level: float = 0.95, survival_span: int = 5) -> dict:
    directory = Path(directory)
    paths = {
        "draws": atomic_write_text(directory / "forecast_draws.csv", forecast_draws_csv(fs)),
        "summary": atomic_write_text(directory / "forecast_summary.csv", forecast_summary_csv(fs, level)),
    }
    if survival_span <= fs.ages.size:
        paths["survival"] = atomic_write_text(
            directory / "survival_summary.csv", survival_summary_csv(fs, survival_span, level))
    return paths
