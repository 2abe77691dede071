import json
import time

import numpy as np
import pytest

from bayesmort.cli import main
from bayesmort.draws import read_draws
from bayesmort.forecast import forecast_from_csv, predictive_interval, survival_curve
from bayesmort.lifetable import read_grid_csv
from bayesmort.samplers import ess


def hmd_pair(tmp_path, years, ages, seed=0):
    """Write an HMD-style deaths/exposures pair with Gompertz-like rates."""
    rng = np.random.default_rng(seed)
    head = "Synthetic, {} (period 1x1)\tLast modified: 01 Jan 2015\n\n  Year  Age  Female  Male  Total\n"
    d_lines, e_lines = [head.format("Deaths")], [head.format("Exposures")]
    for y in years:
        for a in ages:
            q = min(0.5, 5e-5 * np.exp(0.09 * a) * np.exp(-0.01 * (y - years[0])))
            ef, em = rng.uniform(2e4, 3e4, 2).round(2)
            df, dm = rng.binomial(int(ef), q), rng.binomial(int(em), q)
            d_lines.append(f"  {y}  {a}  {df:.2f}  {dm:.2f}  {df + dm:.2f}\n")
            e_lines.append(f"  {y}  {a}  {ef:.2f}  {em:.2f}  {ef + em:.2f}\n")
    dpath, epath = tmp_path / "Deaths_1x1.txt", tmp_path / "Exposures_1x1.txt"
    dpath.write_text("".join(d_lines))
    epath.write_text("".join(e_lines))
    return dpath, epath


@pytest.fixture
def store(tmp_path):
    dpath, epath = hmd_pair(tmp_path, list(range(1998, 2004)), list(range(58, 66)))
    out = tmp_path / "grid.csv"
    assert main(["import", "--deaths", str(dpath), "--exposures", str(epath), "--sex", "female",
                 "--ages", "60-64", "--years", "2000-2003", "--out", str(out)]) == 0
    return out


def fit(store, out, model="gmrf", seed=5, extra=()):
    return main(["fit", "--store", str(store), "--model", model, "--out", str(out), "--iterations", "400",
                 "--burnin", "200", "--thin", "2", "--seed", str(seed),
                 "--set", "window.ages=[60, 64]", "--set", "data.sex=female", *extra])


def test_import_writes_windowed_store_and_is_idempotent(store, tmp_path):
    grid = read_grid_csv(store, "female")
    assert grid.deaths.shape == (5, 4)
    assert list(grid.ages) == [60, 61, 62, 63, 64] and list(grid.years) == [2000, 2001, 2002, 2003]
    assert np.all(grid.exposures > grid.deaths)
    first = store.read_text()
    dpath, epath = tmp_path / "Deaths_1x1.txt", tmp_path / "Exposures_1x1.txt"
    again = tmp_path / "again.csv"
    main(["import", "--deaths", str(dpath), "--exposures", str(epath), "--ages", "60-64",
          "--years", "2000-2003", "--out", str(again)])
    assert again.read_text() == first


def test_import_mismatched_years_is_a_data_error(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    dpath, _ = hmd_pair(a, [2000, 2001], [0, 1])
    _, epath = hmd_pair(b, [2000, 2001, 2002], [0, 1])
    assert main(["import", "--deaths", str(dpath), "--exposures", str(epath), "--out",
                 str(tmp_path / "g.csv")]) == 3


@pytest.mark.parametrize("model", ["gmrf", "hp"])
def test_tiny_fit_is_fast_and_deterministic(store, tmp_path, model):
    start = time.perf_counter()
    assert fit(store, tmp_path / "a", model) == 0
    assert time.perf_counter() - start < 10.0
    assert fit(store, tmp_path / "b", model) == 0
    assert (tmp_path / "a" / "draws.csv").read_bytes() == (tmp_path / "b" / "draws.csv").read_bytes()
    assert "seed: 5" in (tmp_path / "a" / "config.yaml").read_text()
    diag = json.loads((tmp_path / "a" / "diagnostics.json").read_text())
    rates = list(diag["acceptance"].values())
    assert rates and all(0.0 <= r <= 1.0 for r in rates)
    draws = read_draws(tmp_path / "a" / "draws.csv")
    assert draws.model == model and draws.n_draws == 100
    assert fit(store, tmp_path / "c", model, seed=6) == 0
    assert (tmp_path / "c" / "draws.csv").read_bytes() != (tmp_path / "a" / "draws.csv").read_bytes()


def test_forecast_outputs_match_library(store, tmp_path):
    assert fit(store, tmp_path / "fit") == 0
    out = tmp_path / "fc"
    assert main(["forecast", "--draws", str(tmp_path / "fit" / "draws.csv"), "--k", "3",
                 "--level", "0.9", "--survival-span", "2", "--out", str(out), "--seed", "1"]) == 0
    fs = forecast_from_csv((out / "forecast_draws.csv").read_text(), "gmrf")
    assert list(fs.horizons) == [1, 2, 3] and list(fs.ages) == [60, 61, 62, 63, 64]
    summary = (out / "forecast_summary.csv").read_text().splitlines()
    assert summary[0] == "age,horizon,mean,lo90,hi90"
    for line in summary[1:]:
        age, k, mean, lo, hi = line.split(",")
        age, k = int(age), int(k)
        assert (float(lo), float(hi)) == pytest.approx(predictive_interval(fs, age, k, 0.9), rel=1e-15)
        assert float(mean) == pytest.approx(fs.draws(age, k).mean(), rel=1e-15)
    surv = (out / "survival_summary.csv").read_text().splitlines()
    age, k, s, mean, _, _ = surv[1].split(",")
    expected = survival_curve(fs, int(age), int(s), int(k)).mean()
    assert float(mean) == pytest.approx(expected, rel=1e-15)
    again = tmp_path / "fc2"
    main(["forecast", "--draws", str(tmp_path / "fit" / "draws.csv"), "--k", "3", "--level", "0.9",
          "--survival-span", "2", "--out", str(again), "--seed", "1"])
    for path in out.iterdir():
        assert path.read_bytes() == (again / path.name).read_bytes()


def test_diag_table(store, tmp_path, capsys):
    assert fit(store, tmp_path / "fit") == 0
    draws_path = tmp_path / "fit" / "draws.csv"
    assert main(["diag", "--draws", str(draws_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "name,ess,n_draws,degenerate"
    assert len(lines) == 1 + 3 + 5 * 4
    draws = read_draws(draws_path)
    name, value, n, _ = lines[1].split(",")
    assert name == "tau" and int(n) == 100
    assert float(value) == ess(draws.params["tau"])


def test_exit_codes(store, tmp_path):
    missing = str(tmp_path / "nope.csv")
    assert main(["forecast", "--draws", missing, "--k", "0", "--out", str(tmp_path / "o")]) == 2
    assert main(["forecast", "--draws", missing, "--k", "2", "--out", str(tmp_path / "o")]) == 3
    assert main(["diag", "--draws", missing]) == 3
    assert main(["fit", "--store", missing, "--set", "window.ages=[60, 64]"]) == 3
    assert main(["fit", "--store", str(store), "--set", "mcmc.iteratons=3"]) == 2
    # default window 0-89 lies outside the stored ages
    assert main(["fit", "--store", str(store), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--model", "lc"])
    assert exc.value.code == 2


def test_config_show_prints_effective_config(tmp_path, capsys):
    assert main(["config", "show", "--set", "mcmc.iterations=30000", "--seed", "9"]) == 0
    text = capsys.readouterr().out
    assert "iterations: 30000" in text and "seed: 9" in text and "delta_target: 0.55" in text
    path = tmp_path / "c.yaml"
    path.write_text(text)
    assert main(["config", "show", "--config", str(path)]) == 0
    assert capsys.readouterr().out == text


def test_backtest_with_oracle_and_external(tmp_path):
    dpath, epath = hmd_pair(tmp_path, list(range(1980, 2014)), list(range(0, 4)))
    store = tmp_path / "grid.csv"
    assert main(["import", "--deaths", str(dpath), "--exposures", str(epath), "--out", str(store)]) == 0
    common = ["--store", str(store), "--set", "window.ages=[0, 3]", "--set", "data.sex=female",
              "--set", "backtest.models=[]"]
    out = tmp_path / "bt"
    assert main(["backtest", *common, "--oracle", "1e-6", "--out", str(out)]) == 0
    rows = [line.split(",") for line in (out / "scores.csv").read_text().splitlines()[1:]]
    avg = {(r[0], int(r[1])): r for r in rows if r[2] == "all"}
    assert int(avg[("oracle", 5)][3]) == 20 and int(avg[("oracle", 15)][3]) == 10
    measures = json.loads((out / "scores.json").read_text())["measures"]
    assert measures["coverage"]["oracle"]["5"] == 1.0 and measures["rmse"]["oracle"]["5"] == 0.0
    ext = tmp_path / "ext"
    assert main(["backtest", *common, "--external", str(out / "backtest_forecasts.csv"),
                 "--out", str(ext)]) == 0
    assert (ext / "scores.csv").read_text() == (out / "scores.csv").read_text()
