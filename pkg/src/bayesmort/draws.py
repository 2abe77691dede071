"""Posterior draw container and its long CSV format ``iter,block,name,value``.

Parameter rows carry the retained iteration number. Chain metadata and
diagnostics are written as ``block=diagnostics`` rows with ``iter=-1`` and
dotted names (``acceptance.psi[1983]``). Multi-index names use
``:`` inside brackets (``x[40:1990]``, ``Sigma[A:B]``), so one file is enough to forecast.
Wall-clock fields are left out so reruns with the same seed give identical files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .errors import IngestionError, ValidationError
from .hpcurve import PARAM_NAMES

HEADER = ("iter", "block", "name", "value")
BLOCKS = {"hp": ("psi", "mu", "Sigma", "alpha"), "gmrf": ("x", "tau", "rho_age", "b")}


@dataclass
class PosteriorDraws:
    """Thinned MCMC output.

    ``params`` maps block name to an array whose leading axis indexes draws:
    for ``hp`` psi is (M, T, 8), mu (M, 8), Sigma (M, 8, 8), alpha (M, 8);
    for ``gmrf`` x is (M, n_ages, T) and tau, rho_age, b are (M,).
    """

    model: str
    ages: np.ndarray
    years: np.ndarray
    iterations: np.ndarray
    params: dict
    diagnostics: dict = field(default_factory=dict)
    sex: str = "total"

    def __post_init__(self):
        if self.model not in BLOCKS:
            raise ValidationError(f"unknown model {self.model!r}")
        self.ages = np.asarray(self.ages, dtype=int)
        self.years = np.asarray(self.years, dtype=int)
        self.iterations = np.asarray(self.iterations, dtype=int)
        missing = set(BLOCKS[self.model]) - set(self.params)
        if missing:
            raise ValidationError(f"missing parameter blocks {sorted(missing)}")
        for name, arr in self.params.items():
            if np.asarray(arr).shape[0] != self.iterations.size:
                raise ValidationError(f"block {name} has wrong number of draws")

    @property
    def n_draws(self) -> int:
        return int(self.iterations.size)


def _names(model, block, ages, years):
    """Row names for one block, in the C order of the block's trailing axes."""
    if model == "hp":
        if block == "psi":
            return [f"{p}[{y}]" for y in years for p in PARAM_NAMES]
        if block == "Sigma":
            return [f"Sigma[{p}:{q}]" for p in PARAM_NAMES for q in PARAM_NAMES]
        return [f"{block}[{p}]" for p in PARAM_NAMES]
    if block == "x":
        return [f"x[{a}:{y}]" for a in ages for y in years]
    return [block]


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(obj, (list, tuple)):
        out.append((prefix, ";".join(str(v) for v in obj)))
    else:
        out.append((prefix, obj))
    return out


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ("True", "False"):
        return text == "True"
    return None if text == "None" else text


def _unflatten(rows):
    out: dict = {}
    for key, value in rows:
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


VOLATILE = ("wall_time_seconds",)


def draws_to_csv(draws: PosteriorDraws) -> str:
    meta = {
        "model": draws.model,
        "sex": draws.sex,
        "age_min": int(draws.ages[0]),
        "age_max": int(draws.ages[-1]),
        "year_min": int(draws.years[0]),
        "year_max": int(draws.years[-1]),
    }
    out = io.StringIO()
    out.write(",".join(HEADER) + "\n")
    diagnostics = {k: v for k, v in draws.diagnostics.items() if k not in VOLATILE}
    for key, value in _flatten("", {"meta": meta, **diagnostics}, []):
        out.write(f"-1,diagnostics,{key},{_csv_value(value)}\n")
    for block in BLOCKS[draws.model]:
        names = _names(draws.model, block, draws.ages, draws.years)
        values = np.asarray(draws.params[block], dtype=float).reshape(draws.n_draws, -1)
        for it, row in zip(draws.iterations, values):
            prefix = f"{it},{block},"
            out.write("".join(f"{prefix}{n},{v!r}\n" for n, v in zip(names, row.tolist())))
    return out.getvalue()


def _csv_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    text = str(value)
    if any(c in text for c in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def draws_from_csv(text: str) -> PosteriorDraws:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != HEADER:
        raise IngestionError(f"expected header {','.join(HEADER)}")
    diag_rows = []
    blocks: dict[str, dict[str, list]] = {}
    iters: dict[str, list] = {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise IngestionError(f"line {lineno}: expected 4 fields")
        it, block, name, value = row
        if block == "diagnostics":
            diag_rows.append((name, _scalar(value)))
            continue
        try:
            blocks.setdefault(block, {}).setdefault(name, []).append(float(value))
            if name == next(iter(blocks[block])):
                iters.setdefault(block, []).append(int(it))
        except ValueError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from None
    diagnostics = _unflatten(diag_rows)
    meta = diagnostics.pop("meta", None)
    if not meta or "model" not in meta:
        raise IngestionError("draws file has no meta.model diagnostics row")
    model = meta["model"]
    if model not in BLOCKS:
        raise IngestionError(f"unknown model {model!r} in draws file")
    ages = np.arange(meta["age_min"], meta["age_max"] + 1)
    years = np.arange(meta["year_min"], meta["year_max"] + 1)
    first = BLOCKS[model][0]
    if first not in iters:
        raise IngestionError(f"draws file has no {first} rows")
    iterations = np.array(iters[first])
    params = {}
    for block in BLOCKS[model]:
        names = _names(model, block, ages, years)
        try:
            cols = [blocks[block][n] for n in names]
        except KeyError as exc:
            raise IngestionError(f"draws file lacks {block} entry {exc}") from None
        arr = np.array(cols, dtype=float).T
        if arr.shape[0] != iterations.size:
            raise IngestionError(f"block {block} has {arr.shape[0]} draws, expected {iterations.size}")
        params[block] = arr.reshape(_block_shape(model, block, ages.size, years.size, iterations.size))
    return PosteriorDraws(model, ages, years, iterations, params, diagnostics, meta.get("sex", "total"))


def _block_shape(model, block, n_ages, n_years, m):
    if model == "hp":
        return {"psi": (m, n_years, 8), "Sigma": (m, 8, 8)}.get(block, (m, 8))
    return (m, n_ages, n_years) if block == "x" else (m,)


def write_draws(draws: PosteriorDraws, path) -> Path:
    return atomic_write_text(path, draws_to_csv(draws))


def read_draws(path) -> PosteriorDraws:
    return draws_from_csv(Path(path).read_text(encoding="utf-8"))
