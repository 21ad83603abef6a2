"""Plot-ready aggregates and SVG charts from results tables.

The aggregated CSV is the contract; the SVG is a convenience rendering.
"""

from __future__ import annotations

import io
import math
import re
from pathlib import Path
from typing import Optional

import numpy as np

from .results import ResultsTable, atomic_write, fmt

KINDS = {"simulate": "convergence", "defer": "deferral", "sweep": "sweep"}


class EmptyResultsError(ValueError):
    """No rows to plot."""


def infer_kind(results: ResultsTable) -> str:
    exps = {r.experiment for r in results.rows}
    if len(exps) != 1 or next(iter(exps)) not in KINDS:
        raise ValueError(f"cannot infer plot kind from experiments {sorted(exps)}")
    return KINDS[exps.pop()]


def _mean_se(vals) -> tuple:
    v = np.asarray(vals, dtype=float)
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(x if isinstance(x, str) else fmt(x) for x in r))
    return "\n".join(lines) + "\n"


def aggregate(results: ResultsTable, kind: str) -> tuple:
    """Header and rows of the plot-ready table for ``kind``."""
    if kind == "convergence":
        groups: dict = {}
        for r in results.rows:
            if r.experiment == "simulate" and r.metric in ("mse", "mse_lower") and r.rep is not None:
                groups.setdefault((r.estimator, r.metric, r.lam, r.n), []).append(r.value)
        rows = [(est, metric, lam, n, *_mean_se(v), len(v)) for (est, metric, lam, n), v in groups.items()]
        return ("estimator", "metric", "lambda", "n", "mean", "se", "reps"), rows
    if kind == "deferral":
        groups = {}
        pat = re.compile(r"^(deferral_rate|error_rate)@([0-9.]+)$")
        for r in results.rows:
            m = pat.match(r.metric) if r.experiment == "defer" else None
            if m:
                groups.setdefault((r.estimator, r.lam, float(m.group(2))), {}).setdefault(m.group(1), []).append(
                    r.value)
        rows = []
        for (est, lam, nominal), d in sorted(groups.items()):
            dr, _ = _mean_se(d.get("deferral_rate", [math.nan]))
            er, se = _mean_se(d.get("error_rate", [math.nan]))
            rows.append((est, lam, nominal, dr, er, se))
        return ("estimator", "lambda", "nominal_rate", "deferral_rate", "error_rate", "error_se"), rows
    if kind == "sweep":
        rows = [(r.estimator, r.lam, math.log(r.lam), r.value) for r in results.rows
                if r.experiment == "sweep" and r.metric == "frac_negative_lower"]
        return ("estimator", "lambda", "log_lambda", "frac_negative_lower"), rows
    raise ValueError(f"unknown plot kind {kind!r}; expected convergence, deferral or sweep")


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def _render(kind: str, header, rows) -> str:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cate-bounds"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    col = {h: i for i, h in enumerate(header)}
    if kind == "convergence":
        for key in dict.fromkeys((r[0], r[1]) for r in rows):
            pts = sorted((r for r in rows if (r[0], r[1]) == key), key=lambda r: r[col["n"]])
            n = np.array([p[col["n"]] for p in pts], dtype=float)
            mu = np.array([p[col["mean"]] for p in pts])
            se = np.array([p[col["se"]] for p in pts])
            label = key[0] if key[1] == "mse" else f"{key[0]} (lower)"
            ax.plot(n, mu, marker="o", label=label)
            ax.fill_between(n, mu - se, mu + se, alpha=0.2)
        ax.set_xscale("log")
        ax.set_xlabel("training size n")
        ax.set_ylabel("MSE of bound")
    elif kind == "deferral":
        for key in dict.fromkeys((r[0], r[1]) for r in rows):
            pts = [r for r in rows if (r[0], r[1]) == key]
            x = np.array([p[col["deferral_rate"]] for p in pts])
            y = np.array([p[col["error_rate"]] for p in pts])
            se = np.array([p[col["error_se"]] for p in pts])
            ax.plot(x, y, marker=".", label=f"{key[0]}, lambda={key[1]:.3g}")
            ax.fill_between(x, y - se, y + se, alpha=0.2)
        ax.set_xlabel("deferral rate")
        ax.set_ylabel("error rate")
    else:
        for est in dict.fromkeys(r[0] for r in rows):
            pts = sorted((r for r in rows if r[0] == est), key=lambda r: r[col["log_lambda"]])
            ax.plot([p[col["log_lambda"]] for p in pts], [p[col["frac_negative_lower"]] for p in pts],
                    marker="o", linestyle="-" if len(pts) > 1 else "none", label=est)
        ax.set_xlabel("log sensitivity level")
        ax.set_ylabel("fraction of lower bounds <= 0")
    ax.legend()
    fig.tight_layout()
    text = _svg(fig)
    plt.close(fig)
    return text


def emit_plots(results: ResultsTable, kind: Optional[str], out_dir) -> list:
    """Write ``<kind>.csv`` and ``<kind>.svg`` into ``out_dir``; returns the paths."""
    if len(results) == 0:
        raise EmptyResultsError("results table is empty; nothing to plot")
    kind = kind or infer_kind(results)
    header, rows = aggregate(results, kind)
    if not rows:
        raise EmptyResultsError(f"no rows usable for a {kind} plot")
    svg = _render(kind, header, rows)
    out = Path(out_dir)
    paths = [out / f"{kind}.csv", out / f"{kind}.svg"]
    atomic_write(paths[0], _csv(header, rows))
    atomic_write(paths[1], svg)
    return paths
