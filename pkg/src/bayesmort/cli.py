"""Command-line interface.

Subcommands: ``import``, ``fit``, ``forecast``, ``backtest``, ``diag`` and
``config show``. Exit codes: 0 success, 2 validation error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from ._io import atomic_write_text
from .draws import read_draws, write_draws
from .errors import BayesMortError, DataError, ValidationError
from .evalharness import (chain_model, forecasts_to_csv, ingest_external_forecasts, oracle_model,
                          run_backtest, score_forecasts)
from .forecast import write_forecast
from .gmrf import predict_gmrf, run_chain_gmrf
from .hpcurve import PARAM_NAMES
from .hpdyn import predict_forward, run_chain
from .lifetable import build_grid, read_grid_csv, read_hmd_file, window, write_grid_csv
from .samplers import ess, make_rng

log = logging.getLogger("bayesmort")


def _pair(text: str):
    lo, _, hi = text.partition("-")
    try:
        return [int(lo), int(hi or lo)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO-HI, got {text!r}") from None


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_import(args) -> int:
    deaths = read_hmd_file(args.deaths, "deaths", args.sex)
    exposures = read_hmd_file(args.exposures, "exposures", args.sex)
    grid = build_grid(deaths, exposures, args.ages, args.years)
    write_grid_csv(grid, args.out)
    log.info("wrote %d ages x %d years to %s", grid.n_ages, grid.n_years, args.out)
    return 0


def _config_from(args) -> dict:
    overrides = list(args.set or [])
    flags = {
        "model": getattr(args, "model", None),
        "output": getattr(args, "out", None),
        "data.store": getattr(args, "store", None),
        "mcmc.iterations": getattr(args, "iterations", None),
        "mcmc.burnin": getattr(args, "burnin", None),
        "mcmc.thin": getattr(args, "thin", None),
        "mcmc.seed": getattr(args, "seed", None),
    }
    for key, value in flags.items():
        if value is not None:
            node: dict = {}
            cur = node
            parts = key.split(".")
            for part in parts[:-1]:
                cur = cur.setdefault(part, {})
            cur[parts[-1]] = value
            overrides.append(node)
    return cfgmod.load_config(args.config, overrides)


def _load_grid(cfg):
    try:
        grid = read_grid_csv(cfg["data"]["store"], cfg["data"]["sex"])
    except FileNotFoundError as exc:
        raise DataError(f"data store not found: {exc.filename}") from None
    cfgmod.check_against_grid(cfg, grid)
    return grid


def cmd_fit(args) -> int:
    cfg = _config_from(args)
    grid = _load_grid(cfg)
    grid = window(grid, cfg["window"]["ages"], cfg["window"]["years"])
    mcmc = cfgmod.mcmc_config(cfg)
    log.info("fitting %s model on ages %d-%d, years %d-%d", cfg["model"], grid.ages[0], grid.ages[-1],
             grid.years[0], grid.years[-1])
    draws = run_chain(grid, mcmc) if cfg["model"] == "hp" else run_chain_gmrf(grid, mcmc)
    out = Path(cfg["output"])
    write_draws(draws, out / "draws.csv")
    atomic_write_text(out / "diagnostics.json", _dump_json(draws.diagnostics))
    atomic_write_text(out / "config.yaml", cfgmod.dump(cfg))
    log.info("wrote %d draws to %s", draws.n_draws, out)
    return 0


def cmd_forecast(args) -> int:
    if args.k < 1:
        raise ValidationError("forecast horizon k must be at least 1")
    if not 0 < args.level < 1:
        raise ValidationError("level must lie in (0, 1)")
    try:
        draws = read_draws(args.draws)
    except FileNotFoundError as exc:
        raise DataError(f"draws file not found: {exc.filename}") from None
    rng = make_rng(args.seed)
    fs = predict_forward(draws, args.k, rng) if draws.model == "hp" else predict_gmrf(draws, args.k, rng)
    write_forecast(fs, args.out, args.level, args.survival_span)
    log.info("wrote forecasts for horizons 1-%d to %s", args.k, args.out)
    return 0


def cmd_backtest(args) -> int:
    cfg = _config_from(args)
    grid = _load_grid(cfg)
    plan = cfgmod.backtest_plan(cfg)
    plan.check_grid(grid)
    out = Path(cfg["output"])
    if args.external:
        try:
            text = Path(args.external).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise DataError(f"external forecast file not found: {exc.filename}") from None
        table = score_forecasts(grid, plan, ingest_external_forecasts(text, plan))
    else:
        models = {}
        for name in cfg["backtest"]["models"]:
            models[name] = chain_model(cfgmod.mcmc_config(cfg, name))
        if args.oracle is not None:
            models["oracle"] = oracle_model(grid, args.oracle)
        table = run_backtest(grid, plan, models, seed=cfg["mcmc"]["seed"])
        atomic_write_text(out / "backtest_forecasts.csv", forecasts_to_csv(table.forecasts))
    table.write(out)
    for row in table.rows:
        if row["age"] == "all":
            log.info("%s k=%d: coverage %.3f width %.3g score %.3g rmse %.3g (%d rounds)", row["model"],
                     row["horizon"], row["coverage"], row["width"], row["score"], row["rmse"],
                     row["n_rounds"])
    if table.failed:
        log.warning("%d rounds failed and were excluded", len(table.failed))
    return 0


def ess_table(draws) -> list[tuple[str, float, bool]]:
    rows = []
    if draws.model == "hp":
        psi = draws.params["psi"]
        for t, year in enumerate(draws.years):
            for i, p in enumerate(PARAM_NAMES):
                rows.append((f"{p}[{year}]", psi[:, t, i]))
        for block in ("mu", "alpha"):
            for i, p in enumerate(PARAM_NAMES):
                rows.append((f"{block}[{p}]", draws.params[block][:, i]))
        for i, p in enumerate(PARAM_NAMES):
            rows.append((f"Sigma[{p}:{p}]", draws.params["Sigma"][:, i, i]))
    else:
        for name in ("tau", "rho_age", "b"):
            rows.append((name, draws.params[name]))
        x = draws.params["x"]
        for a, age in enumerate(draws.ages):
            for t, year in enumerate(draws.years):
                rows.append((f"x[{age}:{year}]", x[:, a, t]))
    return [(name, *ess(series, full=True)) for name, series in rows]


def cmd_diag(args) -> int:
    try:
        draws = read_draws(args.draws)
    except FileNotFoundError as exc:
        raise DataError(f"draws file not found: {exc.filename}") from None
    if draws.n_draws < 10:
        raise ValidationError("need at least 10 draws for ESS")
    lines = ["name,ess,n_draws,degenerate"]
    lines += [f"{name},{value!r},{draws.n_draws},{int(flag)}" for name, value, flag in ess_table(draws)]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_config_show(args) -> int:
    sys.stdout.write(cfgmod.dump(_config_from(args)))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_args(p, run_flags=True):
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one setting, e.g. mcmc.iterations=1000 (repeatable)")
    if run_flags:
        p.add_argument("--model", choices=cfgmod.MODELS)
        p.add_argument("--store", help="grid CSV written by 'import'")
        p.add_argument("--out", help="output directory")
        p.add_argument("--iterations", type=int)
        p.add_argument("--burnin", type=int)
        p.add_argument("--thin", type=int)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesmort", description="Bayesian mortality forecasting")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", help="convert HMD deaths and exposures files to a grid CSV")
    p.add_argument("--deaths", required=True)
    p.add_argument("--exposures", required=True)
    p.add_argument("--sex", default="female", choices=("female", "male", "total"))
    p.add_argument("--ages", type=_pair, help="age range LO-HI")
    p.add_argument("--years", type=_pair, help="year range LO-HI")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    _add_config_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", help="posterior-predictive forecasts from a draws file")
    p.add_argument("--draws", required=True)
    p.add_argument("--k", type=int, required=True, help="largest horizon; horizons 1..k are produced")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--survival-span", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("backtest", help="rolling-origin backtest and scores")
    _add_config_args(p)
    p.add_argument("--external", help="score forecasts from a CSV instead of fitting")
    p.add_argument("--oracle", type=float, metavar="EPS",
                   help="also score a sanity model that knows the held-out rates, +-EPS")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("diag", help="ESS table for a draws file")
    p.add_argument("--draws", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="config_command", required=True)
    show = csub.add_parser("show", help="print the effective configuration")
    _add_config_args(show)
    show.set_defaults(func=cmd_config_show)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BayesMortError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename)
        return DataError.exit_code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
