"""Experiment drivers: convergence study, deferral curve, sensitivity sweep, estimation.

Each driver takes a resolved configuration mapping (see :mod:`cate_bounds.config`)
and returns its results without touching the filesystem.  Replications fan
out over a process pool; every task derives its own seeds from
``(seed, replication, ...)`` so rows do not depend on scheduling, and rows
are sorted before they are returned.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import config as C
from .blearner import derive_seed, fit_blearner, fit_oracle, fit_plugin
from .dgp import oracle_eval, sample_confounded, sample_covariates, sample_synthetic, true_bound
from .domain import LOWER, UPPER, Dataset, from_log_lambda, validate_dataset
from .results import ResultsTable, Row, SchemaError, fmt, load_dataset_csv, read_matrix

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A fit or metric produced non-finite values."""


def run_tasks(fn: Callable, tasks: Sequence, threads: int = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally over a process pool; order preserved."""
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def _finite(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


# --- convergence study ----------------------------------------------------------

@dataclass(frozen=True)
class _SimTask:
    cfg: dict
    rep: int
    n: int
    log_lam: float
    X_test: np.ndarray
    truth: dict


def _simulate_task(task: _SimTask) -> list:
    cfg = task.cfg
    s = from_log_lambda(task.log_lam)
    lam = s.lam
    ds = sample_synthetic(task.n, derive_seed(cfg["seed"], 11, task.rep))
    fit_seed = derive_seed(cfg["seed"], 12, task.rep, task.n, int(round(task.log_lam * 1e6)))
    rows = []
    for v in C.variants(cfg):
        bcfg = C.blearner_config(cfg, fit_seed, v.second_stage)
        if v.estimator == "blearner":
            bf = fit_blearner(ds, s, bcfg)
        elif v.estimator == "plugin":
            bf = fit_plugin(ds, s, bcfg)
        else:
            bf = fit_oracle(ds, s, oracle_eval, v.second_stage, fit_seed, bcfg.sides)
        pred = bf.predict(task.X_test)
        for side in cfg["sides"]:
            est = _finite(pred.upper if side == "upper" else pred.lower, f"{v.name} {side} bound")
            metric = "mse" if side == "upper" else "mse_lower"
            rows.append(Row("simulate", v.name, task.n, lam, task.rep, metric,
                            float(np.mean((est - task.truth[side]) ** 2))))
    return rows


def _order_rows(rows: list, estimator_order: Sequence[str]) -> list:
    rank = {name: i for i, name in enumerate(estimator_order)}

    def key(r: Row):
        return (rank.get(r.estimator, len(rank)), r.estimator, -1 if r.lam is None else r.lam,
                -1 if r.n is None else r.n, -1 if r.rep is None else r.rep, r.metric)

    return sorted(rows, key=key)


def summarize(table: ResultsTable, group_keys=("experiment", "estimator", "n", "lam", "metric")) -> ResultsTable:
    """Mean and standard error over replications, per group."""
    groups: dict = {}
    for r in table.rows:
        groups.setdefault(tuple(getattr(r, k) for k in group_keys), []).append(r.value)
    out = ResultsTable()
    for key in groups:
        vals = np.asarray(groups[key])
        rec = dict(zip(group_keys, key))
        se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
        for stat, value in (("mean", float(np.mean(vals))), ("se", se)):
            out.append(rec["experiment"], rec["estimator"], rec["n"], rec["lam"], None,
                       f"{rec['metric']}_{stat}", value)
    return out


def cmd_simulate(cfg: dict) -> ResultsTable:
    """Bound-estimation MSE on a fixed test set over an ``n`` grid and replications."""
    variants = C.variants(cfg)
    X_test = sample_covariates(cfg["n_test"], cfg["test_seed"])
    tasks = []
    for log_lam in cfg["log_lambda"]:
        s = from_log_lambda(log_lam)
        truth = {"upper": true_bound(X_test, s, UPPER), "lower": true_bound(X_test, s, LOWER)}
        for rep in range(cfg["reps"]):
            for n in cfg["n_grid"]:
                tasks.append(_SimTask(cfg, rep, n, log_lam, X_test, truth))
    log.info("simulate: %d tasks on %d worker(s)", len(tasks), cfg["threads"])
    rows = [r for chunk in run_tasks(_simulate_task, tasks, cfg["threads"]) for r in chunk]
    table = ResultsTable(_order_rows(rows, [v.name for v in variants]))
    table.extras = {"summary.csv": summarize(table).to_csv_text()}
    return table


# --- data sources ---------------------------------------------------------------

def load_data(data: dict, seed: int, n: Optional[int] = None) -> Dataset:
    kind = data["kind"]
    if kind == "csv":
        return load_dataset_csv(data["path"], treatment=data.get("treatment", "treatment"),
                                outcome=data.get("outcome", "outcome"), y0=data.get("y0"), y1=data.get("y1"),
                                counterfactual=data.get("counterfactual"), exclude=data.get("exclude") or ())
    n = data["n"] if n is None else n
    if kind == "synthetic":
        return sample_synthetic(n, seed)
    return sample_confounded(n, seed, C.confounded_config(data))


# --- deferral -------------------------------------------------------------------

def deferral_order(lower, upper) -> np.ndarray:
    """Deferral priority: zero-straddling intervals first, then by width, widest first."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    straddle = (lower <= 0.0) & (upper >= 0.0)
    width = upper - lower
    return np.lexsort((np.arange(lower.size), -width, ~straddle))


def recommend(lower, upper) -> np.ndarray:
    """Treat iff the interval is above zero, control iff below; ties by midpoint sign."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    mid = 0.5 * (lower + upper)
    return np.where(lower > 0.0, 1, np.where(upper < 0.0, 0, (mid > 0.0).astype(int)))


def deferral_curve(lower, upper, better, rates) -> tuple:
    """Achieved deferral rates and error rates among non-deferred points.

    ``better`` is the correct arm per point.  At each nominal rate ``r`` the
    first ``round(r * m)`` points in :func:`deferral_order` are deferred.
    With nothing left to decide the error rate is 0.
    """
    better = np.asarray(better).astype(int)
    m = better.size
    order = deferral_order(lower, upper)
    wrong = recommend(lower, upper) != better
    deferred_rates, error_rates = [], []
    for r in rates:
        k = int(round(r * m))
        kept = order[k:]
        deferred_rates.append(k / m)
        error_rates.append(float(np.mean(wrong[kept])) if kept.size else 0.0)
    return np.asarray(deferred_rates), np.asarray(error_rates)


def _defer_task(args) -> list:
    cfg, rep = args
    data = cfg["data"]
    s = from_log_lambda(cfg["log_lambda"][0])
    if data["kind"] == "csv":
        full = load_data(data, 0)
        if not full.has_potential_outcomes:
            raise SchemaError("deferral needs ground-truth potential outcome columns (y0/y1 or counterfactual)")
        perm = np.random.default_rng(derive_seed(cfg["seed"], 23, rep)).permutation(full.n)
        n_test = max(1, int(round(cfg["test_fraction"] * full.n)))
        test, train = full.subset(np.sort(perm[:n_test])), full.subset(np.sort(perm[n_test:]))
    else:
        train = load_data(data, derive_seed(cfg["seed"], 21, rep))
        test = load_data(data, derive_seed(cfg["seed"], 22, rep), n=cfg["n_test"])
    bf = fit_blearner(train, s, C.blearner_config(cfg, derive_seed(cfg["seed"], 24, rep)))
    pred = bf.predict(test.X)
    lower, upper = _finite(pred.lower, "lower bound"), _finite(pred.upper, "upper bound")
    better = (test.Y1 > test.Y0).astype(int)
    step = cfg["deferral_step"]
    rates = [round(j * step, 12) for j in range(int(round(1 / step)) + 1)]
    achieved, errors = deferral_curve(lower, upper, better, rates)
    rows = []
    for r, dr, er in zip(rates, achieved, errors):
        rows.append(Row("defer", "blearner", train.n, s.lam, rep, f"deferral_rate@{r:.2f}", dr))
        rows.append(Row("defer", "blearner", train.n, s.lam, rep, f"error_rate@{r:.2f}", er))
    straddle = (lower <= 0.0) & (upper >= 0.0)
    kept = ~straddle
    wrong = recommend(lower, upper) != better
    rows.append(Row("defer", "blearner", train.n, s.lam, rep, "policy_deferral_rate", float(np.mean(straddle))))
    rows.append(Row("defer", "blearner", train.n, s.lam, rep, "policy_error_rate",
                    float(np.mean(wrong[kept])) if kept.any() else 0.0))
    return rows


def cmd_defer(cfg: dict) -> ResultsTable:
    """Error rate of bound-based treatment recommendations versus deferral rate."""
    if cfg["data"]["kind"] == "csv":
        d = cfg["data"]
        if not ((d.get("y0") and d.get("y1")) or d.get("counterfactual")):
            raise SchemaError("deferral needs ground-truth columns: set data.y0 and data.y1, or data.counterfactual")
    tasks = [(cfg, rep) for rep in range(cfg["reps"])]
    rows = [r for chunk in run_tasks(_defer_task, tasks, cfg["threads"]) for r in chunk]
    table = ResultsTable(rows)
    table.extras = {"summary.csv": summarize(table).to_csv_text()}
    return table


# --- sensitivity sweep ----------------------------------------------------------

def cmd_sweep(cfg: dict) -> ResultsTable:
    """Bounds over a sensitivity grid; fraction of non-positive lower bounds per level."""
    ds = load_data(cfg["data"], derive_seed(cfg["seed"], 31))
    validate_dataset(ds, require_both_arms=True)
    base = C.blearner_config(cfg, derive_seed(cfg["seed"], 32))
    reuse = base.nuisance.rho_route == "cvar"
    levels = [("dr", 0.0)] if cfg.get("include_dr", True) else []
    levels += [("blearner", v) for v in cfg["log_lambda"]]
    table = ResultsTable()
    bounds_lines = ["row_id,estimator,log_lambda,lambda,lower,upper"]
    nuisances = None
    for name, log_lam in levels:
        s = from_log_lambda(log_lam)
        bf = fit_blearner(ds, s, base, nuisances=nuisances)
        if reuse:
            nuisances = bf.nuisances
        pred = bf.predict(ds.X)
        if name == "dr":
            pred_lower = pred_upper = _finite(pred.upper, "point estimate")
        else:
            pred_lower, pred_upper = _finite(pred.lower, "lower bound"), _finite(pred.upper, "upper bound")
        table.append("sweep", name, ds.n, s.lam, None, "frac_negative_lower", float(np.mean(pred_lower <= 0.0)))
        table.append("sweep", name, ds.n, s.lam, None, "mean_lower", float(np.mean(pred_lower)))
        table.append("sweep", name, ds.n, s.lam, None, "mean_upper", float(np.mean(pred_upper)))
        for i, (lo, hi) in enumerate(zip(pred_lower, pred_upper)):
            bounds_lines.append(",".join([str(i), name, fmt(log_lam), fmt(s.lam), fmt(lo), fmt(hi)]))
    table.extras = {"bounds.csv": "\n".join(bounds_lines) + "\n"}
    return table


# --- estimation on user data ----------------------------------------------------

@dataclass
class BoundsOutput:
    row_ids: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lam: float


def load_query(path, columns: Sequence[str]) -> np.ndarray:
    header, M = read_matrix(path)
    missing = [c for c in columns if c not in header]
    if missing:
        raise SchemaError(f"{path}: query is missing covariate columns {missing}")
    col = {h: i for i, h in enumerate(header)}
    Xq = M[:, [col[c] for c in columns]]
    bad = np.argwhere(~np.isfinite(Xq))
    if bad.size:
        raise SchemaError(f"{path}: row {int(bad[0, 0]) + 2}, column {columns[bad[0, 1]]!r} is not finite")
    return Xq


def cmd_estimate(cfg: dict) -> BoundsOutput:
    """Fit bounds on the training data and evaluate them on the query rows."""
    ds = load_data(cfg["data"], derive_seed(cfg["seed"], 41))
    s = from_log_lambda(cfg["log_lambda"][0])
    bf = fit_blearner(ds, s, C.blearner_config(cfg, derive_seed(cfg["seed"], 42)))
    Xq = ds.X if not cfg.get("query") else load_query(cfg["query"], ds.columns or [f"x{j}" for j in range(ds.d)])
    pred = bf.predict(Xq)
    upper = _finite(pred.upper, "upper bound") if "upper" in cfg["sides"] else pred.upper
    lower = _finite(pred.lower, "lower bound") if "lower" in cfg["sides"] else pred.lower
    return BoundsOutput(np.arange(Xq.shape[0]), lower, upper, s.lam)
