from __future__ import annotations

import math
import time

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from cate_bounds import config as C
from cate_bounds.cli import main
from cate_bounds.dgp import ConfoundedConfig, sample_confounded, sample_synthetic
from cate_bounds.experiments import cmd_estimate, cmd_simulate, cmd_sweep, deferral_curve, deferral_order, recommend
from cate_bounds.plots import EmptyResultsError, aggregate, emit_plots
from cate_bounds.results import (
    ResultsTable,
    Row,
    SchemaError,
    load_dataset_csv,
    read_bounds_csv,
    sha256_text,
    write_bounds_csv,
    write_dataset_csv,
)

SMALL = {"nuisance": {"outcome": {"n_estimators": 20}}, "second_stage": {"n_estimators": 20}}


def _write_yaml(path, cfg):
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


@pytest.fixture
def train_csv(tmp_path):
    path = tmp_path / "train.csv"
    write_dataset_csv(path, sample_synthetic(300, 1))
    return str(path)


# --- configuration -----------------------------------------------------------------

@pytest.mark.parametrize("bad", [{"bogus": 1}, {"nuisance": {"outcome": {"depth": 3}}},
                                 {"second_stage": {"mode": "erm", "typo": 1}}, {"data": {"nn": 5}}])
def test_unknown_keys_rejected(bad):
    with pytest.raises(C.ConfigError):
        C.resolve("defer", bad)


def test_precedence_defaults_file_flags():
    cfg = C.resolve("simulate", {"seed": 5, "reps": 7, "folds": 3}, {"seed": 9})
    assert cfg["seed"] == 9 and cfg["reps"] == 7 and cfg["folds"] == 3
    assert cfg["n_test"] == 400 and cfg["nuisance"]["outcome"]["kind"] == "forest"
    cfg = C.resolve("simulate", {"nuisance": {"outcome": {"max_depth": 3}}}, {"nuisance": {"propensity": "logistic"}})
    assert cfg["nuisance"]["outcome"]["max_depth"] == 3 and cfg["nuisance"]["propensity"] == "logistic"


def test_lambda_converted_to_log_scale():
    assert C.resolve("sweep", {}, {"lambda": [1.0, math.e]})["log_lambda"] == pytest.approx([0.0, 1.0])
    with pytest.raises(C.ConfigError):
        C.resolve("sweep", {}, {"lambda": [0.5]})
    with pytest.raises(C.ConfigError):
        C.resolve("sweep", {}, {"lambda": [2.0], "log_lambda": [1.0]})


@pytest.mark.parametrize("bad", [{"folds": 1}, {"reps": 0}, {"threads": 0}, {"deferral_step": 0.3},
                                 {"log_lambda": [1.0, 2.0]}, {"log_lambda": [-0.1]}, {"sides": ["upper", "upper"]}])
def test_invalid_values_rejected(bad):
    with pytest.raises(C.ConfigError):
        C.resolve("defer", bad)


def test_parse_grid():
    assert C.parse_grid("1.0") == [1.0]
    assert C.parse_grid("0.1,0.5, 1") == [0.1, 0.5, 1.0]
    assert C.parse_grid("0.1:1.0:0.1") == pytest.approx([0.1 * k for k in range(1, 11)])
    with pytest.raises(C.ConfigError):
        C.parse_grid("a,b")


def test_config_echo(tmp_path, train_csv):
    out = tmp_path / "est"
    cfg_path = _write_yaml(tmp_path / "c.yaml", {"folds": 3, **SMALL})
    assert main(["estimate", "--config", cfg_path, "--input", train_csv, "--lambda", "2", "--out", str(out)]) == 0
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    expect = C.resolve("estimate", {"folds": 3, **SMALL},
                       {"lambda": [2.0], "out": str(out), "data": {"kind": "csv", "path": train_csv}})
    assert echoed == expect


# --- CSV round trips ---------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(values=st.lists(finite, min_size=1, max_size=20), lam=st.floats(1, 100))
def test_results_table_round_trip(tmp_path_factory, values, lam):
    table = ResultsTable([Row("simulate", "blearner", 100 + i, lam, i, "mse", v) for i, v in enumerate(values)])
    table.append("simulate", "blearner", 100, lam, None, "mse_mean", float("nan"))
    path = tmp_path_factory.mktemp("rt") / "r.csv"
    table.write_csv(path)
    back = ResultsTable.read_csv(path)
    assert back.rows[:-1] == table.rows[:-1]
    assert math.isnan(back.rows[-1].value) and back.rows[-1].rep is None
    assert back.to_csv_text() == table.to_csv_text()


def test_results_schema_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        ResultsTable.read_csv(p)
    p.write_text("experiment,estimator,n,lambda,rep,metric,value\nsimulate,b,1,2\n")
    with pytest.raises(SchemaError, match=":2"):
        ResultsTable.read_csv(p)


def test_dataset_csv_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,treatment,outcome\n0.1,1,2\n0.2,2,3\n")
    with pytest.raises(SchemaError, match="row 3"):
        load_dataset_csv(p)
    p.write_text("x,treat,outcome\n0.1,1,2\n")
    with pytest.raises(SchemaError, match="treatment"):
        load_dataset_csv(p)
    p.write_text("x,treatment,outcome\n0.1,1,abc\n")
    with pytest.raises(SchemaError, match="row 2"):
        load_dataset_csv(p)


def test_bounds_csv_round_trip(tmp_path, rng):
    lower, upper = np.sort(rng.normal(size=(2, 50)) * 1e3, axis=0)
    write_bounds_csv(tmp_path / "b.csv", lower, upper, math.e, "abc")
    back = read_bounds_csv(tmp_path / "b.csv")
    assert np.array_equal(back["lower"], lower) and np.array_equal(back["upper"], upper)


def test_estimate_round_trip(tmp_path, train_csv):
    out = tmp_path / "est"
    assert main(["estimate", "--input", train_csv, "--log-lambda", "1", "--folds", "3", "--out", str(out)]) == 0
    back = read_bounds_csv(out / "bounds.csv")
    text = (out / "bounds.csv").read_text()
    assert text.splitlines()[0] == f"# config_sha256={sha256_text((out / 'config.yaml').read_text())}"
    assert len(back["lower"]) == 300
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    direct = cmd_estimate(cfg)
    assert np.array_equal(back["lower"], direct.lower) and np.array_equal(back["upper"], direct.upper)


def test_estimate_unit_lambda_and_query(tmp_path, train_csv):
    query = tmp_path / "q.csv"
    X = sample_synthetic(40, 2).X
    query.write_text("x0,x1,x2,x3,x4\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in X) + "\n")
    out = tmp_path / "est1"
    code = main(["estimate", "--input", train_csv, "--lambda", "1", "--folds", "3", "--query", str(query),
                 "--out", str(out)])
    assert code == 0
    back = read_bounds_csv(out / "bounds.csv")
    assert len(back["lower"]) == 40
    assert np.array_equal(back["lower"], back["upper"])


# --- exit codes --------------------------------------------------------------------

def test_exit_config_errors(tmp_path, train_csv, capsys):
    assert main(["estimate", "--input", train_csv, "--folds", "1"]) == 2
    assert main(["estimate", "--input", train_csv, "--lambda", "0.5"]) == 2
    assert main(["simulate", "--config", _write_yaml(tmp_path / "c.yaml", {"bogus": 1})]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_data_errors(tmp_path, train_csv, capsys):
    assert main(["estimate", "--input", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("x,treatment,outcome\n0.1,1,2\n0.2,0.5,3\n")
    assert main(["estimate", "--input", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert main(["defer", "--input", train_csv, "--out", str(tmp_path / "o")]) == 3
    empty = tmp_path / "empty.csv"
    ResultsTable().write_csv(empty)
    assert main(["plot", "--results", str(empty), "--out", str(tmp_path / "p")]) == 3
    assert not (tmp_path / "p").exists()
    assert "data error" in capsys.readouterr().err


def test_exit_numeric_errors(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    sep = tmp_path / "sep.csv"
    sep.write_text("x,treatment,outcome\n" + "\n".join(f"{float(v)!r},{int(v > 0)},{float(v + rng.normal())!r}" for v in x) + "\n")
    assert main(["estimate", "--input", str(sep), "--nuisance", "logistic-e", "--out", str(tmp_path / "o")]) == 4
    y = rng.normal(size=200)
    y[3], y[5] = 1e308, -1e308
    huge = tmp_path / "huge.csv"
    huge.write_text("x,treatment,outcome\n" + "\n".join(
        f"{float(rng.normal())!r},{i % 2},{float(v)!r}" for i, v in enumerate(y)) + "\n")
    with np.errstate(all="ignore"):
        assert main(["estimate", "--input", str(huge), "--out", str(tmp_path / "o2")]) == 4
    assert "numeric failure" in capsys.readouterr().err


# --- deferral ------------------------------------------------------------------------

def test_deferral_order_and_recommendation():
    lower = np.array([0.5, -1.0, -0.2, -3.0, 1.0])
    upper = np.array([2.5, 1.0, 0.1, -2.5, 1.1])
    # straddling intervals first (width 2.0 then 0.3), then the rest by width
    assert deferral_order(lower, upper).tolist() == [1, 2, 0, 3, 4]
    assert recommend(lower, upper).tolist() == [1, 0, 0, 0, 1]


def test_deferral_curve_properties(rng):
    m = 500
    mid = rng.normal(size=m)
    half = rng.exponential(size=m)
    better = (mid + rng.normal(size=m) > 0).astype(int)
    rates = [j / 20 for j in range(21)]
    achieved, errors = deferral_curve(mid - half, mid + half, better, rates)
    assert np.all(np.diff(achieved) >= 0) and achieved[-1] == 1.0 and achieved[0] == 0.0
    assert errors[-1] == 0.0
    assert np.all((errors >= 0) & (errors <= 1))


def test_deferral_unit_lambda_points(rng):
    tau_hat = rng.normal(size=300)
    better = (tau_hat + rng.normal(size=300) > 0).astype(int)
    straddle = (tau_hat <= 0) & (tau_hat >= 0)
    assert not straddle.any()
    _, errors = deferral_curve(tau_hat, tau_hat, better, [0.0])
    assert errors[0] == np.mean((tau_hat > 0).astype(int) != better)


# --- experiments -------------------------------------------------------------------------

def test_simulate_row_counts():
    cfg = C.resolve("simulate", {"n_grid": [100, 200], "reps": 2, **SMALL})
    table = cmd_simulate(cfg)
    assert len(table.select(metric="mse")) == 2 * 3 * 2
    assert len(table.select(metric="mse_lower")) == 2 * 3 * 2
    assert {r.estimator for r in table.rows} == {"blearner", "oracle", "plugin"}
    summary = table.extras["summary.csv"].splitlines()
    assert summary[0] == "experiment,estimator,n,lambda,rep,metric,value"
    assert sum(",mse_mean," in line for line in summary) == 2 * 3


def test_simulate_smoke_runtime():
    cfg = C.resolve("simulate", {"n_grid": [100, 400], "reps": 3})
    start = time.perf_counter()
    table = cmd_simulate(cfg)
    assert time.perf_counter() - start < 60
    assert len(table.select(metric="mse")) == 2 * 3 * 3


def test_sweep_unit_lambda_row_uses_point_estimate():
    cfg = C.resolve("sweep", {"data": {"n": 300}, "log_lambda": [0.0, 0.5], **SMALL})
    table = cmd_sweep(cfg)
    lines = table.extras["bounds.csv"].splitlines()[1:]
    dr = [line.split(",") for line in lines if line.split(",")[1] == "dr"]
    assert len(dr) == 300 and all(cells[4] == cells[5] for cells in dr)
    unit = [line.split(",") for line in lines if line.split(",")[1] == "blearner" and line.split(",")[2] == "0"]
    assert [c[4] for c in unit] == [c[5] for c in unit]
    frac = {(r.estimator, r.lam): r.value for r in table.select(metric="frac_negative_lower")}
    assert frac[("dr", 1.0)] == frac[("blearner", 1.0)]


@pytest.mark.slow
def test_sweep_on_retirement_schema_csv(tmp_path):
    # synthetic stand-in with the savings-study column layout
    n = 9915
    rng = np.random.default_rng(3)
    ds = sample_confounded(n, 8, ConfoundedConfig(lambda_star=math.e, cate_shift=0.15, cate_scale=0.0,
                                                  confounder_effect=0.5))
    cols = ["age", "inc", "educ", "fsize", "marr", "twoearn", "db", "pira", "hown"]
    X = np.column_stack([ds.X, rng.integers(0, 2, (n, 4))])
    lines = [",".join(cols + ["e401", "net_tfa"])]
    lines += [",".join([*(repr(float(v)) for v in X[i]), str(int(ds.A[i])), repr(float(ds.Y[i]))]) for i in range(n)]
    path = tmp_path / "k401.csv"
    path.write_text("\n".join(lines) + "\n")
    forest = {"kind": "forest", "n_estimators": 100, "max_depth": 7, "max_features": 3, "min_samples_leaf": 10}
    cfg_path = _write_yaml(tmp_path / "c.yaml", {"second_stage": {"mode": "erm", **forest}})
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", cfg_path, "--input", str(path), "--treatment", "e401", "--outcome", "net_tfa",
                 "--log-lambda", "0.1:1.0:0.1", "--out", str(out)])
    assert code == 0
    table = ResultsTable.read_csv(out / "results.csv")
    rows = [r for r in table.select(metric="frac_negative_lower") if r.estimator == "blearner"]
    assert len(rows) == 10 and all(r.n == n for r in rows)


# --- plots ------------------------------------------------------------------------------

def test_plot_empty_table_writes_nothing(tmp_path):
    with pytest.raises(EmptyResultsError):
        emit_plots(ResultsTable(), None, tmp_path / "p")
    assert not (tmp_path / "p").exists()


def test_plot_convergence_and_sweep(tmp_path):
    t = ResultsTable()
    for est in ("blearner", "oracle"):
        for n in (100, 200):
            for rep, v in enumerate((1.0, 3.0)):
                t.append("simulate", est, n, math.e, rep, "mse", v * 100 / n)
    header, rows = aggregate(t, "convergence")
    assert len(rows) == 4
    r = {(row[0], row[3]): row for row in rows}
    assert r[("oracle", 100)][header.index("mean")] == 2.0
    assert r[("oracle", 100)][header.index("se")] == pytest.approx(1.0)
    paths = emit_plots(t, None, tmp_path / "c")
    assert [p.name for p in paths] == ["convergence.csv", "convergence.svg"]
    first = paths[1].read_text()
    emit_plots(t, None, tmp_path / "c")
    assert paths[1].read_text() == first
    s = ResultsTable()
    for k in range(1, 4):
        s.append("sweep", "blearner", 50, math.exp(k / 10), None, "frac_negative_lower", k / 10)
    header, rows = aggregate(s, "sweep")
    assert [row[header.index("log_lambda")] for row in rows] == pytest.approx([0.1, 0.2, 0.3])
    emit_plots(s, "sweep", tmp_path / "s")
    assert (tmp_path / "s" / "sweep.svg").read_text().startswith("<?xml")


def test_plot_via_cli(tmp_path):
    out = tmp_path / "def"
    cfg_path = _write_yaml(tmp_path / "c.yaml", {"reps": 2, "n_test": 200, "data": {"n": 300}, **SMALL})
    assert main(["defer", "--config", cfg_path, "--out", str(out)]) == 0
    assert main(["plot", "--results", str(out / "results.csv"), "--out", str(tmp_path / "p")]) == 0
    lines = (tmp_path / "p" / "deferral.csv").read_text().splitlines()
    assert lines[0] == "estimator,lambda,nominal_rate,deferral_rate,error_rate,error_se"
    assert len(lines) == 1 + 21
