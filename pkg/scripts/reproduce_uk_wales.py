#!/usr/bin/env python3
"""Reproduce the UK-Wales female experiment from locally supplied HMD files.

Runs the command-line pipeline end to end:

1. ``import`` the HMD period 1x1 deaths and exposures for females, ages 0-89;
2. ``fit`` each model on 1983-1992 and ``forecast`` 21 years ahead, reporting
   the 95% interval coverage of the observed rates in 1997, 2002, 2007 and
   2013 (horizons 5, 10, 15 and 21);
3. ``backtest`` the GMRF model over the default rolling-origin plan and
   compare its over-age average coverage for k = 5 with the reference 0.89.

HMD data need registration, so the files are not shipped. Usage::

    python scripts/reproduce_uk_wales.py --hmd-dir path/to/GBRTENW --out runs/ukw

where the directory holds ``Deaths_1x1.txt`` and ``Exposures_1x1.txt``.
The full run with default MCMC settings takes on the order of an hour on
one core; set ``BAYESMORT_THREADS`` to run backtest rounds in parallel.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from bayesmort.cli import main as cli_main
from bayesmort.lifetable import read_grid_csv

log = logging.getLogger("reproduce_uk_wales")

TRAIN_YEARS = (1983, 1992)
HORIZONS = (5, 10, 15, 21)
REFERENCE_COVERAGE_K5 = 0.89
TOLERANCE = 0.07


def _run(argv: list[str]) -> None:
    log.info("bayesmort %s", " ".join(argv))
    code = cli_main(argv)
    if code != 0:
        raise RuntimeError(f"'bayesmort {argv[0]}' exited with code {code}")


def _summary_intervals(path: Path, horizon: int) -> dict[int, tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    lo_col, hi_col = 3, 4
    return {int(r[0]): (float(r[lo_col]), float(r[hi_col])) for r in rows[1:] if int(r[1]) == horizon}


def _backtest_coverage(path: Path, model: str, horizon: int) -> float:
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["model"] == model and int(row["horizon"]) == horizon and row["age"] == "all":
                return float(row["coverage"])
    raise RuntimeError(f"no over-age row for {model}, k={horizon} in {path}")


def reproduce(deaths, exposures, out, models=("gmrf", "hp"), iterations=None, burnin=None, thin=None,
              seed: int = 0) -> dict:
    """Run the pipeline and return the headline numbers as a dict."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    store = out / "uk_wales_female.csv"
    _run(["import", "--deaths", str(deaths), "--exposures", str(exposures), "--sex", "female",
          "--ages", "0-89", "--out", str(store)])
    grid = read_grid_csv(store, "female")

    common = ["--store", str(store), "--set", "data.sex=female", "--set", "window.ages=[0, 89]",
              "--seed", str(seed)]
    for flag, value in (("--iterations", iterations), ("--burnin", burnin), ("--thin", thin)):
        if value is not None:
            common += [flag, str(value)]

    result = {"target_years": [TRAIN_YEARS[1] + k for k in HORIZONS], "forecast_coverage": {}}
    for model in models:
        fit_dir, fc_dir = out / f"fit_{model}", out / f"forecast_{model}"
        _run(["fit", *common, "--model", model, "--set", f"window.years=[{TRAIN_YEARS[0]}, {TRAIN_YEARS[1]}]",
              "--out", str(fit_dir)])
        _run(["forecast", "--draws", str(fit_dir / "draws.csv"), "--k", str(max(HORIZONS)),
              "--seed", str(seed), "--out", str(fc_dir)])
        per_year = {}
        for k in HORIZONS:
            year = TRAIN_YEARS[1] + k
            if year not in grid.years:
                continue
            intervals = _summary_intervals(fc_dir / "forecast_summary.csv", k)
            observed = grid.rates[:, int(np.flatnonzero(grid.years == year)[0])]
            inside = [lo <= obs <= hi for (lo, hi), obs in zip((intervals[a] for a in grid.ages), observed)]
            per_year[year] = float(np.mean(inside))
        result["forecast_coverage"][model] = per_year

    bt_dir = out / "backtest"
    _run(["backtest", *common, "--model", "gmrf", "--set", "backtest.models=[gmrf]", "--out", str(bt_dir)])
    cov = _backtest_coverage(bt_dir / "scores.csv", "gmrf", 5)
    result["backtest_coverage_k5"] = cov
    result["reference_coverage_k5"] = REFERENCE_COVERAGE_K5
    result["within_tolerance"] = abs(cov - REFERENCE_COVERAGE_K5) <= TOLERANCE
    (out / "reproduction.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--hmd-dir", help="directory with Deaths_1x1.txt and Exposures_1x1.txt")
    parser.add_argument("--deaths", help="HMD deaths file (overrides --hmd-dir)")
    parser.add_argument("--exposures", help="HMD exposures file (overrides --hmd-dir)")
    parser.add_argument("--out", default="ukw_reproduction")
    parser.add_argument("--models", default="gmrf,hp", help="models for the 1983-1992 forecasts")
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--burnin", type=int)
    parser.add_argument("--thin", type=int)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    root = Path(args.hmd_dir) if args.hmd_dir else None
    deaths = args.deaths or (root / "Deaths_1x1.txt" if root else None)
    exposures = args.exposures or (root / "Exposures_1x1.txt" if root else None)
    if deaths is None or exposures is None:
        parser.error("give --hmd-dir or both --deaths and --exposures")

    result = reproduce(deaths, exposures, args.out, tuple(args.models.split(",")), args.iterations,
                       args.burnin, args.thin, args.seed)
    for model, per_year in result["forecast_coverage"].items():
        for year, cov in sorted(per_year.items()):
            print(f"{model} forecast from {TRAIN_YEARS[1]}: coverage in {year} = {cov:.3f}")
    cov = result["backtest_coverage_k5"]
    verdict = "PASS" if result["within_tolerance"] else "FAIL"
    print(f"{verdict}: GMRF backtest coverage for k=5 = {cov:.3f} "
          f"(reference {REFERENCE_COVERAGE_K5} +- {TOLERANCE})")
    return 0 if result["within_tolerance"] else 1


if __name__ == "__main__":
    sys.exit(main())
