"""Run configuration: YAML file, then ``section.key=value`` overrides, then flags.

Every key has a default, so ``config show`` with no file prints the full
effective configuration.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ValidationError
from .evalharness import BacktestPlan
from .gmrf import GMRFConfig
from .hpdyn import HPConfig
from .lifetable import SEXES, MortalityGrid

DEFAULTS = {
    "model": "gmrf",
    "data": {"store": "grid.csv", "sex": "female"},
    "window": {"ages": [0, 89], "years": None},
    "mcmc": {
        "iterations": 60000,
        "burnin": 20000,
        "thin": 10,
        "seed": 0,
        "accept_target": 0.25,
        "delta_target": 0.55,
        "rho_target": 0.35,
        "proposal": "wls",
        "truncation_mc": 0,
    },
    "forecast": {"horizons": [5, 10, 15, 21], "level": 0.95, "survival_span": 5},
    "backtest": {
        "window": 10,
        "horizons": [5, 15],
        "first_origin": 1989,
        "last_target": 2013,
        "models": ["gmrf"],
    },
    "output": "out",
}

MODELS = ("hp", "gmrf")


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ValidationError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"configuration key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``mcmc.iterations=1000`` -> ``{"mcmc": {"iterations": 1000}}`` (YAML-typed value)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValidationError(f"override must look like section.key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse override value {raw!r}: {exc}") from None
    node: dict = {}
    cur = node
    parts = key.split(".")
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value
    return node


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValidationError(f"config {path} must be a mapping at the top level")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        cfg = _merge(cfg, item if isinstance(item, dict) else parse_override(item))
    validate(cfg)
    return cfg


def _int_pair(value, name):
    if value is None:
        return None
    if not (isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value)):
        raise ValidationError(f"{name} must be a pair of integers [lo, hi]")
    if value[0] > value[1]:
        raise ValidationError(f"{name} range is empty: {value}")
    return tuple(value)


def validate(cfg: dict) -> None:
    if cfg["model"] not in MODELS:
        raise ValidationError(f"model must be one of {MODELS}, got {cfg['model']!r}")
    if cfg["data"]["sex"] not in SEXES:
        raise ValidationError(f"data.sex must be one of {SEXES}")
    _int_pair(cfg["window"]["ages"], "window.ages")
    _int_pair(cfg["window"]["years"], "window.years")
    mcmc_config(cfg, "hp")
    mcmc_config(cfg, "gmrf")
    fc = cfg["forecast"]
    if not fc["horizons"] or any(not isinstance(k, int) or k < 1 for k in fc["horizons"]):
        raise ValidationError("forecast.horizons must be positive integers")
    if not 0 < fc["level"] < 1:
        raise ValidationError("forecast.level must lie in (0, 1)")
    if not isinstance(fc["survival_span"], int) or fc["survival_span"] < 1:
        raise ValidationError("forecast.survival_span must be a positive integer")
    backtest_plan(cfg)
    for m in cfg["backtest"]["models"]:
        if m not in MODELS:
            raise ValidationError(f"backtest.models entries must be in {MODELS}, got {m!r}")


def mcmc_config(cfg: dict, model: str | None = None):
    m = cfg["mcmc"]
    model = model or cfg["model"]
    common = {"iterations": m["iterations"], "burnin": m["burnin"], "thin": m["thin"], "seed": m["seed"]}
    for key, value in common.items():
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValidationError(f"mcmc.{key} must be an integer")
    try:
        if model == "hp":
            return HPConfig(accept_target=m["accept_target"], proposal=m["proposal"],
                            truncation_mc=m["truncation_mc"], **common)
        return GMRFConfig(delta_target=m["delta_target"], rho_target=m["rho_target"], **common)
    except TypeError as exc:
        raise ValidationError(f"bad mcmc settings: {exc}") from None


def backtest_plan(cfg: dict) -> BacktestPlan:
    b = cfg["backtest"]
    return BacktestPlan(window=b["window"], horizons=tuple(b["horizons"]), first_origin=b["first_origin"],
                        last_target=b["last_target"], ages=_int_pair(cfg["window"]["ages"], "window.ages"),
                        level=cfg["forecast"]["level"])


def check_against_grid(cfg: dict, grid: MortalityGrid) -> None:
    """Fail early if the requested window is not inside the data."""
    a0, a1 = int(grid.ages[0]), int(grid.ages[-1])
    y0, y1 = int(grid.years[0]), int(grid.years[-1])
    ages = _int_pair(cfg["window"]["ages"], "window.ages")
    years = _int_pair(cfg["window"]["years"], "window.years")
    if ages and (ages[0] < a0 or ages[1] > a1):
        raise ValidationError(f"window.ages {list(ages)} outside data ages {a0}-{a1}")
    if years and (years[0] < y0 or years[1] > y1):
        raise ValidationError(f"window.years {list(years)} outside data years {y0}-{y1}")


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)
