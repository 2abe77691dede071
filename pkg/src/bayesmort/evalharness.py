"""Rolling-origin backtests and interval-forecast scoring.

Every model, internal or external, is reduced to the same record per
(model, horizon, origin): a point forecast and an interval for each age.
Scores are then computed by one code path against the empirical
probabilities ``d / n`` of the held-out year.

Coverage counts an observation on an interval endpoint as covered.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ._io import atomic_write_text
from .errors import BayesMortError, IngestionError, ValidationError
from .forecast import ForecastSet, quantile_interval
from .lifetable import MortalityGrid, window

log = logging.getLogger(__name__)

THREADS_ENV = "BAYESMORT_THREADS"
MEASURES = ("coverage", "width", "score", "rmse")


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def _alpha(level: float) -> float:
    alpha = 1.0 - level
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"interval level must lie in (0, 1), got {level}")
    return alpha


def interval_score(lo, hi, obs, level: float = 0.95):
    """Interval score: width plus ``2/alpha`` times any exceedance.

    Works elementwise on arrays. Raises ``ValidationError`` if ``lo > hi``
    anywhere.
    """
    alpha = _alpha(level)
    lo, hi, obs = np.asarray(lo, float), np.asarray(hi, float), np.asarray(obs, float)
    if np.any(lo > hi):
        raise ValidationError("interval lower bound exceeds upper bound")
    below = np.where(obs < lo, lo - obs, 0.0)
    above = np.where(obs > hi, obs - hi, 0.0)
    score = (hi - lo) + (2.0 / alpha) * (below + above)
    return float(score) if score.ndim == 0 else score


def coverage_and_width(lo, hi, obs) -> tuple[float, float]:
    """Fraction of closed intervals containing the observation, and mean width."""
    lo, hi, obs = np.asarray(lo, float), np.asarray(hi, float), np.asarray(obs, float)
    if lo.size == 0:
        raise ValidationError("no intervals to score")
    if np.any(lo > hi):
        raise ValidationError("interval lower bound exceeds upper bound")
    covered = (obs >= lo) & (obs <= hi)
    return float(np.mean(covered)), float(np.mean(hi - lo))


def rmse(pred, obs) -> float:
    pred, obs = np.asarray(pred, float), np.asarray(obs, float)
    if pred.size == 0:
        raise ValidationError("no forecasts to score")
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


# ---------------------------------------------------------------------------
# plan and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BacktestPlan:
    """Training window length, horizons, origin range, ages and interval level.

    ``last_target`` bounds the origins: for horizon ``k`` they run from
    ``first_origin`` to ``last_target - k``.
    """

    window: int = 10
    horizons: tuple = (5, 15)
    first_origin: int = 1989
    last_target: int = 2013
    ages: tuple = (0, 89)
    level: float = 0.95

    def __post_init__(self):
        if self.window < 1:
            raise ValidationError("training window must be at least one year")
        if not self.horizons or any(int(k) < 1 for k in self.horizons):
            raise ValidationError("horizons must be positive integers")
        _alpha(self.level)
        if self.ages[0] > self.ages[1]:
            raise ValidationError("age range is empty")
        object.__setattr__(self, "horizons", tuple(int(k) for k in self.horizons))

    def origins(self, k: int) -> list[int]:
        return list(range(self.first_origin, self.last_target - k + 1))

    def rounds(self) -> list[tuple[int, int]]:
        return [(k, t) for k in self.horizons for t in self.origins(k)]

    def check_grid(self, grid: MortalityGrid) -> None:
        first_needed = self.first_origin - self.window + 1
        y0, y1 = int(grid.years[0]), int(grid.years[-1])
        a0, a1 = int(grid.ages[0]), int(grid.ages[-1])
        if first_needed < y0 or self.last_target > y1:
            raise ValidationError(
                f"plan needs years {first_needed}-{self.last_target}, data has {y0}-{y1}")
        if self.ages[0] < a0 or self.ages[1] > a1:
            raise ValidationError(f"plan needs ages {self.ages[0]}-{self.ages[1]}, data has {a0}-{a1}")
        if not any(self.origins(k) for k in self.horizons):
            raise ValidationError("plan has no forecast rounds")


@dataclass
class IntervalForecast:
    """Point forecast and interval per age for one model, horizon and origin."""

    ages: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=int)
        self.mean = np.asarray(self.mean, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if not (self.ages.shape == self.mean.shape == self.lo.shape == self.hi.shape):
            raise ValidationError("ages, mean, lo and hi must have equal lengths")
        if np.any(self.lo > self.hi):
            raise ValidationError("interval lower bound exceeds upper bound")

    def select(self, ages) -> "IntervalForecast":
        pos = {a: i for i, a in enumerate(self.ages.tolist())}
        try:
            idx = [pos[a] for a in ages]
        except KeyError as exc:
            raise ValidationError(f"forecast lacks age {exc}") from None
        return IntervalForecast(self.ages[idx], self.mean[idx], self.lo[idx], self.hi[idx])


def summarize(fs: ForecastSet, horizon: int, level: float) -> IntervalForecast:
    samples = fs.samples[fs._h(horizon)]
    lo, hi = quantile_interval(samples, level)
    return IntervalForecast(fs.ages, samples.mean(axis=-1), lo, hi)


# A model maps (training grid, horizon, seed) to predictive samples or a summary.
Model = Callable[[MortalityGrid, int, int], "ForecastSet | IntervalForecast"]


def chain_model(config) -> Model:
    """Backtest model that runs an MCMC chain per round and forecasts from it.

    ``config`` is a :class:`~bayesmort.gmrf.GMRFConfig` or
    :class:`~bayesmort.hpdyn.HPConfig`; its seed is replaced per round.
    """
    from .gmrf import GMRFConfig, predict_gmrf, run_chain_gmrf
    from .hpdyn import predict_forward, run_chain
    from .samplers import make_rng

    def fit_forecast(train: MortalityGrid, k: int, seed: int):
        cfg = replace(config, seed=seed)
        if isinstance(config, GMRFConfig):
            return predict_gmrf(run_chain_gmrf(train, cfg), k, make_rng([seed, 1]))
        return predict_forward(run_chain(train, cfg), k, make_rng([seed, 1]), cfg.box)

    return fit_forecast


def oracle_model(grid: MortalityGrid, eps: float) -> Model:
    """Sanity model that peeks at the held-out year: mean = observed, interval = observed +- eps."""
    if eps < 0:
        raise ValidationError("oracle half-width must be non-negative")

    def fit_forecast(train: MortalityGrid, k: int, seed: int):
        target = int(train.years[-1]) + k
        obs = observed_rates(grid, (int(train.ages[0]), int(train.ages[-1])), target)
        return IntervalForecast(train.ages, obs, obs - eps, obs + eps)

    return fit_forecast


@dataclass
class ScoreTable:
    """Per-age and over-age scores for each model and horizon.

    ``rows`` holds dicts with keys ``model, horizon, age, n_rounds`` and the
    four measures; ``age`` is ``"all"`` for the average over ages.
    ``failed`` lists ``(model, horizon, origin, message)`` for rounds
    excluded because the fit or forecast failed.
    """

    level: float
    rows: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    forecasts: dict = field(default_factory=dict)

    def average(self, model: str, horizon: int) -> dict:
        for row in self.rows:
            if row["model"] == model and row["horizon"] == horizon and row["age"] == "all":
                return row
        raise KeyError((model, horizon))

    def per_age(self, model: str, horizon: int) -> list:
        return [r for r in self.rows
                if r["model"] == model and r["horizon"] == horizon and r["age"] != "all"]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("model,horizon,age,n_rounds,coverage,width,score,rmse\n")
        for r in self.rows:
            out.write(f"{r['model']},{r['horizon']},{r['age']},{r['n_rounds']},"
                      + ",".join(repr(float(r[m])) for m in MEASURES) + "\n")
        return out.getvalue()

    def summary(self) -> dict:
        """Over-age averages laid out as measure -> model -> horizon."""
        out = {m: {} for m in MEASURES}
        for r in self.rows:
            if r["age"] != "all":
                continue
            for m in MEASURES:
                out[m].setdefault(r["model"], {})[str(r["horizon"])] = r[m]
        return {"level": self.level, "measures": out,
                "failed_rounds": [list(f) for f in self.failed]}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def write(self, directory) -> dict:
        directory = Path(directory)
        return {
            "csv": atomic_write_text(directory / "scores.csv", self.to_csv()),
            "json": atomic_write_text(directory / "scores.json", self.to_json() + "\n"),
        }


def observed_rates(grid: MortalityGrid, ages, year: int) -> np.ndarray:
    sub = window(grid, (ages[0], ages[-1]), (year, year))
    return sub.rates[:, 0]


def score_forecasts(grid: MortalityGrid, plan: BacktestPlan, forecasts: dict,
                    failed: Iterable = ()) -> ScoreTable:
    """Score ``{(model, horizon, origin): IntervalForecast}`` against held-out rates."""
    ages = np.arange(plan.ages[0], plan.ages[1] + 1)
    table = ScoreTable(plan.level, failed=list(failed), forecasts=dict(forecasts))
    groups: dict = {}
    for (model, k, origin), fc in forecasts.items():
        groups.setdefault((model, k), []).append((origin, fc.select(ages)))
    for (model, k) in sorted(groups):
        rounds = sorted(groups[(model, k)], key=lambda r: r[0])
        obs = np.array([observed_rates(grid, ages, origin + k) for origin, _ in rounds])
        lo = np.array([fc.lo for _, fc in rounds])
        hi = np.array([fc.hi for _, fc in rounds])
        mean = np.array([fc.mean for _, fc in rounds])
        per_age = []
        for a, age in enumerate(ages):
            cov, width = coverage_and_width(lo[:, a], hi[:, a], obs[:, a])
            row = {"model": model, "horizon": k, "age": int(age), "n_rounds": len(rounds),
                   "coverage": cov, "width": width,
                   "score": float(np.mean(interval_score(lo[:, a], hi[:, a], obs[:, a], plan.level))),
                   "rmse": rmse(mean[:, a], obs[:, a])}
            per_age.append(row)
        table.rows.extend(per_age)
        avg = {m: float(np.mean([r[m] for r in per_age])) for m in MEASURES}
        table.rows.append({"model": model, "horizon": k, "age": "all", "n_rounds": len(rounds), **avg})
    return table


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be at least 1")
    return n


def round_seed(seed: int, k: int, origin: int) -> int:
    """Seed for one round, fixed by (seed, horizon, origin) whatever the scheduling."""
    return int(np.random.SeedSequence([seed, k, origin]).generate_state(1)[0])


def run_backtest(grid: MortalityGrid, plan: BacktestPlan, models: dict[str, Model],
                 seed: int = 0, workers: int | None = None) -> ScoreTable:
    """Fit on each window ``[T-W+1, T]``, forecast ``T+k`` and score.

    A round whose model raises a package error is excluded and listed in
    ``ScoreTable.failed``.
    """
    plan.check_grid(grid)
    if not models:
        raise ValidationError("no models to backtest")
    workers = default_workers() if workers is None else workers
    jobs = [(name, k, origin) for name in models for k, origin in plan.rounds()]

    def run(job):
        name, k, origin = job
        train = window(grid, plan.ages, (origin - plan.window + 1, origin))
        try:
            out = models[name](train, k, round_seed(seed, k, origin))
            if isinstance(out, ForecastSet):
                out = summarize(out, k, plan.level)
            return job, out, None
        except (BayesMortError, ValueError, ArithmeticError) as exc:
            log.warning("backtest round %s k=%d origin=%d failed: %s", name, k, origin, exc)
            return job, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    forecasts = {job: out for job, out, err in results if err is None}
    failed = [(*job, err) for job, _, err in results if err is not None]
    return score_forecasts(grid, plan, forecasts, failed)


# ---------------------------------------------------------------------------
# external forecasts
# ---------------------------------------------------------------------------

EXTERNAL_HEADER = ["model", "origin", "horizon", "age", "mean", "lo", "hi"]


def forecasts_to_csv(forecasts: dict) -> str:
    out = io.StringIO()
    out.write(",".join(EXTERNAL_HEADER) + "\n")
    for (model, k, origin) in sorted(forecasts):
        fc = forecasts[(model, k, origin)]
        for age, m, lo, hi in zip(fc.ages.tolist(), fc.mean.tolist(), fc.lo.tolist(), fc.hi.tolist()):
            out.write(f"{model},{origin},{k},{age},{m!r},{lo!r},{hi!r}\n")
    return out.getvalue()


def ingest_external_forecasts(text: str, plan: BacktestPlan | None = None) -> dict:
    """Parse ``model,origin,horizon,age,mean,lo,hi`` rows into interval forecasts.

    All row-level problems are collected and raised together as one
    ``IngestionError`` naming each line. With a ``plan``, every
    (model, horizon, origin) must cover the plan's ages and rounds.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != EXTERNAL_HEADER:
        raise IngestionError(f"expected header {','.join(EXTERNAL_HEADER)}")
    errors: list[str] = []
    cells: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(EXTERNAL_HEADER):
            errors.append(f"line {lineno}: expected {len(EXTERNAL_HEADER)} fields, got {len(row)}")
            continue
        try:
            model = row[0].strip()
            origin, k, age = int(row[1]), int(row[2]), int(row[3])
            mean, lo, hi = float(row[4]), float(row[5]), float(row[6])
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
            continue
        if not model:
            errors.append(f"line {lineno}: empty model name")
        elif not all(np.isfinite([mean, lo, hi])):
            errors.append(f"line {lineno}: non-finite value")
        elif lo > hi:
            errors.append(f"line {lineno}: lo > hi")
        elif (model, k, origin, age) in cells:
            errors.append(f"line {lineno}: duplicate row for {model} origin {origin} horizon {k} age {age}")
        else:
            cells[(model, k, origin, age)] = (mean, lo, hi)
    groups: dict = {}
    for (model, k, origin, age), vals in cells.items():
        groups.setdefault((model, k, origin), {})[age] = vals
    if plan is not None:
        ages = range(plan.ages[0], plan.ages[1] + 1)
        models = sorted({key[0] for key in groups})
        for model in models:
            for k, origin in plan.rounds():
                got = groups.get((model, k, origin))
                if got is None:
                    errors.append(f"{model}: missing origin {origin} horizon {k}")
                    continue
                missing = [a for a in ages if a not in got]
                if missing:
                    errors.append(f"{model}: origin {origin} horizon {k} missing ages {_ranges(missing)}")
    if errors:
        raise IngestionError("; ".join(errors))
    out = {}
    for key, by_age in groups.items():
        ages_sorted = sorted(by_age)
        vals = np.array([by_age[a] for a in ages_sorted])
        out[key] = IntervalForecast(ages_sorted, vals[:, 0], vals[:, 1], vals[:, 2])
    return out


def _ranges(values) -> str:
    """Compress sorted integers into ``a-b`` runs for error messages."""
    values = sorted(values)
    runs = [[values[0], values[0]]]
    for v in values[1:]:
        if v == runs[-1][1] + 1:
            runs[-1][1] = v
        else:
            runs.append([v, v])
    return ",".join(str(a) if a == b else f"{a}-{b}" for a, b in runs)
