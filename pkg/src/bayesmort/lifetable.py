"""Life-table ingestion and the age-by-year mortality grid.

HMD period 1x1 files (``Deaths_1x1.txt``, ``Exposures_1x1.txt``) are parsed
into :class:`HMDTable` objects, combined into a :class:`MortalityGrid` of
deaths ``d`` and *initial* exposures ``n = N + d/2`` and persisted as a long
CSV with header ``age,year,deaths,exposure``.

Ages above the requested window are truncated, not aggregated.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .errors import DataError, IngestionError, ValidationError

SEXES = ("female", "male", "total")
CSV_HEADER = ("age", "year", "deaths", "exposure")


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_sex(sex: str) -> str:
    sex = sex.lower()
    if sex not in SEXES:
        raise ValidationError(f"sex must be one of {SEXES}, got {sex!r}")
    return sex


@dataclass(frozen=True, eq=False)
class MortalityGrid:
    """Deaths and initial exposures on ages x calendar years.

    ``deaths[i, j]`` refers to age ``ages[i]`` and year ``years[j]``. Model
    code indexes years as ``t = j + 1``.
    """

    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray
    exposures: np.ndarray
    sex: str = "total"

    def __post_init__(self):
        ages = _frozen(self.ages, int)
        years = _frozen(self.years, int)
        d = _frozen(self.deaths)
        n = _frozen(self.exposures)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "deaths", d)
        object.__setattr__(self, "exposures", n)
        object.__setattr__(self, "sex", _check_sex(self.sex))
        shape = (ages.size, years.size)
        if d.shape != shape or n.shape != shape:
            raise DataError(f"deaths {d.shape} and exposures {n.shape} must both be {shape}")
        if ages.size == 0 or years.size == 0:
            raise DataError("empty grid")
        if np.any(np.diff(ages) != 1) or np.any(np.diff(years) != 1):
            raise DataError("ages and years must be consecutive integers")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(n))):
            raise DataError("non-finite deaths or exposures")
        bad = np.argwhere(~(n > 0))
        if bad.size:
            i, j = bad[0]
            raise DataError(f"exposure must be positive: age {ages[i]}, year {years[j]} has {n[i, j]}")
        bad = np.argwhere((d < 0) | (d > n))
        if bad.size:
            i, j = bad[0]
            raise DataError(
                f"deaths must lie in [0, exposure]: age {ages[i]}, year {years[j]} "
                f"has d={d[i, j]}, n={n[i, j]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.deaths.shape

    @property
    def n_ages(self) -> int:
        return self.deaths.shape[0]

    @property
    def n_years(self) -> int:
        return self.deaths.shape[1]

    @property
    def rates(self) -> np.ndarray:
        """Empirical death probabilities ``d / n``."""
        return self.deaths / self.exposures

    def __eq__(self, other) -> bool:
        if not isinstance(other, MortalityGrid):
            return NotImplemented
        return (
            self.sex == other.sex
            and np.array_equal(self.ages, other.ages)
            and np.array_equal(self.years, other.years)
            and np.array_equal(self.deaths, other.deaths)
            and np.array_equal(self.exposures, other.exposures)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class HMDTable:
    """One sex column of an HMD 1x1 table; ``values`` is ages x years, NaN = missing."""

    kind: str
    sex: str
    ages: np.ndarray
    years: np.ndarray
    values: np.ndarray

    def select(self, ages=None, years=None) -> np.ndarray:
        """Values inside the inclusive ``ages``/``years`` ranges; missing cells are an error."""
        ia = _range_index(self.ages, ages, "age")
        iy = _range_index(self.years, years, "year")
        sub = self.values[np.ix_(ia, iy)]
        missing = np.argwhere(np.isnan(sub))
        if missing.size:
            i, j = missing[0]
            raise IngestionError(
                f"missing {self.kind} value at age {self.ages[ia][i]}, year {self.years[iy][j]}"
            )
        return sub


def _range_index(axis: np.ndarray, bounds, label: str) -> np.ndarray:
    if bounds is None:
        return np.arange(axis.size)
    lo, hi = int(bounds[0]), int(bounds[1])
    if lo > hi:
        raise ValidationError(f"{label} range [{lo}, {hi}] is empty")
    if lo < axis[0] or hi > axis[-1]:
        raise ValidationError(f"{label} range [{lo}, {hi}] exceeds available [{axis[0]}, {axis[-1]}]")
    return np.arange(lo - axis[0], hi - axis[0] + 1)


def _parse_age(token: str) -> int:
    return int(token[:-1]) if token.endswith("+") else int(token)


def parse_hmd_table(text: str, kind: str, sex: str) -> HMDTable:
    """Parse an HMD period 1x1 text table (columns Year Age Female Male Total).

    Header lines before the ``Year Age ...`` line are skipped. ``110+`` maps to
    age 110 and ``.`` marks a missing value. Every year must list the same ages.
    """
    if kind not in ("deaths", "exposures"):
        raise ValidationError(f"kind must be 'deaths' or 'exposures', got {kind!r}")
    sex = _check_sex(sex)
    lines = text.splitlines()
    header_at = None
    for k, line in enumerate(lines):
        tokens = line.split()
        if len(tokens) >= 3 and tokens[0] == "Year" and tokens[1] == "Age":
            header_at, columns = k, [t.lower() for t in tokens]
            break
    if header_at is None:
        raise IngestionError("no 'Year Age ...' header line found")
    if sex not in columns:
        raise IngestionError(f"column for sex {sex!r} not present in header {columns}")
    col = columns.index(sex)

    cells: dict[int, dict[int, float]] = {}
    for lineno, line in enumerate(lines[header_at + 1:], start=header_at + 2):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != len(columns):
            raise IngestionError(f"line {lineno}: expected {len(columns)} fields, got {len(tokens)}")
        try:
            year = int(tokens[0])
            age = _parse_age(tokens[1])
            raw = tokens[col]
            value = np.nan if raw == "." else float(raw)
        except ValueError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from None
        row = cells.setdefault(year, {})
        if age in row:
            raise IngestionError(f"line {lineno}: duplicate cell age {age}, year {year}")
        row[age] = value
    if not cells:
        raise IngestionError("table contains no data rows")

    years = np.array(sorted(cells))
    age_sets = {y: frozenset(cells[y]) for y in years}
    reference = age_sets[years[0]]
    for y in years[1:]:
        if age_sets[y] != reference:
            raise IngestionError(
                f"ragged table: year {y} lists {len(age_sets[y])} ages, year {years[0]} lists {len(reference)}"
            )
    ages = np.array(sorted(reference))
    if np.any(np.diff(ages) != 1) or np.any(np.diff(years) != 1):
        raise IngestionError("ages and years must form consecutive integer ranges")
    values = np.array([[cells[y][a] for y in years] for a in ages], dtype=float)
    return HMDTable(kind=kind, sex=sex, ages=ages, years=years, values=values)


def read_hmd_file(path, kind: str, sex: str) -> HMDTable:
    return parse_hmd_table(Path(path).read_text(encoding="utf-8", errors="replace"), kind, sex)


def to_initial_exposure(exposure, deaths) -> np.ndarray:
    """Initial exposed-to-risk from the mid-year (average) population: ``N + d/2``."""
    exposure = np.asarray(exposure, dtype=float)
    deaths = np.asarray(deaths, dtype=float)
    if exposure.shape != deaths.shape:
        raise DataError(f"shape mismatch: exposures {exposure.shape} vs deaths {deaths.shape}")
    return exposure + deaths / 2


def build_grid(deaths: HMDTable, exposures: HMDTable, ages=None, years=None) -> MortalityGrid:
    """Combine HMD deaths and exposure tables into a grid of initial exposures."""
    if deaths.sex != exposures.sex:
        raise DataError(f"sex mismatch: {deaths.sex} vs {exposures.sex}")
    if not np.array_equal(deaths.years, exposures.years):
        raise DataError(
            f"year ranges differ: deaths {deaths.years[0]}-{deaths.years[-1]}, "
            f"exposures {exposures.years[0]}-{exposures.years[-1]}"
        )
    if not np.array_equal(deaths.ages, exposures.ages):
        raise DataError("age ranges of deaths and exposures differ")
    ia = _range_index(deaths.ages, ages, "age")
    iy = _range_index(deaths.years, years, "year")
    d = deaths.select(ages, years)
    n = to_initial_exposure(exposures.select(ages, years), d)
    return MortalityGrid(deaths.ages[ia], deaths.years[iy], d, n, deaths.sex)


def window(grid: MortalityGrid, ages=None, years=None) -> MortalityGrid:
    """Sub-grid over inclusive age and calendar-year ranges (a copy)."""
    ia = _range_index(grid.ages, ages, "age")
    iy = _range_index(grid.years, years, "year")
    sub = np.ix_(ia, iy)
    return MortalityGrid(grid.ages[ia], grid.years[iy], grid.deaths[sub], grid.exposures[sub], grid.sex)


# ---------------------------------------------------------------------------
# long CSV store
# ---------------------------------------------------------------------------

def grid_to_csv(grid: MortalityGrid) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_HEADER) + "\n")
    for i, age in enumerate(grid.ages):
        for j, year in enumerate(grid.years):
            out.write(f"{age},{year},{float(grid.deaths[i, j])!r},{float(grid.exposures[i, j])!r}\n")
    return out.getvalue()


def grid_from_csv(text: str, sex: str = "total") -> MortalityGrid:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise IngestionError(f"expected header {','.join(CSV_HEADER)}, got {header}")
    cells = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise IngestionError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            key = (int(row[0]), int(row[1]))
            cells[key] = (float(row[2]), float(row[3]))
        except ValueError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from None
    if not cells:
        raise IngestionError("grid CSV contains no rows")
    ages = np.array(sorted({a for a, _ in cells}))
    years = np.array(sorted({y for _, y in cells}))
    if len(cells) != ages.size * years.size:
        raise IngestionError("grid CSV is not rectangular")
    if np.any(np.diff(ages) != 1) or np.any(np.diff(years) != 1):
        raise IngestionError("grid CSV ages and years must be consecutive")
    d = np.empty((ages.size, years.size))
    n = np.empty_like(d)
    for (a, y), (dv, nv) in cells.items():
        d[a - ages[0], y - years[0]] = dv
        n[a - ages[0], y - years[0]] = nv
    return MortalityGrid(ages, years, d, n, sex)


def write_grid_csv(grid: MortalityGrid, path) -> Path:
    return atomic_write_text(path, grid_to_csv(grid))


def read_grid_csv(path, sex: str = "total") -> MortalityGrid:
    return grid_from_csv(Path(path).read_text(encoding="utf-8"), sex)
