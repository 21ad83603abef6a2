"""Command-line entry point: ``cate-bounds {simulate,defer,sweep,estimate,plot}``.

Configuration comes from built-in defaults, then an optional YAML file
(``--config``), then flags; later sources win.  Every run writes its resolved
configuration to ``config.yaml`` in the output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as C
from .blearner import CrossFitError
from .domain import DatasetError, FoldError, SensitivityError
from .experiments import NumericError, cmd_defer, cmd_estimate, cmd_simulate, cmd_sweep
from .learners import IRLSDivergenceError
from .plots import EmptyResultsError, emit_plots
from .pseudo import PropensityContractError
from .results import ResultsTable, atomic_write, sha256_text, write_bounds_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cate_bounds")


def _add_common(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML configuration file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if command == "plot":
        p.add_argument("--results", metavar="PATH", help="results CSV written by another command")
        p.add_argument("--kind", choices=("convergence", "deferral", "sweep"), help="chart type (default: inferred)")
        return
    p.add_argument("--seed", type=int, help="base random seed")
    lam = p.add_mutually_exclusive_group()
    lam.add_argument("--lambda", dest="lam", metavar="GRID", help="sensitivity level(s), e.g. 2.0 or 1.5,2,3")
    lam.add_argument("--log-lambda", dest="log_lam", metavar="GRID",
                     help="log sensitivity level(s), e.g. 1.0, 0.1,0.5,1 or 0.1:1.0:0.1")
    p.add_argument("--folds", type=int, help="cross-fitting folds K")
    p.add_argument("--nuisance", choices=tuple(C.NUISANCE_PRESETS), help="first-stage learner preset")
    p.add_argument("--second-stage", choices=tuple(C.SECOND_STAGE_PRESETS), help="second-stage learner preset")
    p.add_argument("--threads", type=int, help="worker processes for replications")
    if command in ("simulate", "defer"):
        p.add_argument("--reps", type=int, help="number of replications")
    if command in ("defer", "sweep", "estimate"):
        p.add_argument("--input", metavar="CSV", help="training data CSV (default: synthetic generator)")
        p.add_argument("--treatment", help="treatment column name")
        p.add_argument("--outcome", help="outcome column name")
    if command == "estimate":
        p.add_argument("--query", metavar="CSV", help="covariates to evaluate (default: training rows)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cate-bounds",
                                     description="Sharp CATE bounds under bounded hidden confounding.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "MSE of bound estimators over a sample-size grid",
        "defer": "error rate versus deferral rate for bound-based recommendations",
        "sweep": "bounds over a grid of sensitivity levels",
        "estimate": "fit bounds on a CSV and write per-row intervals",
        "plot": "aggregate a results CSV into plot data and an SVG chart",
    }
    for name in C.COMMANDS:
        _add_common(sub.add_parser(name, help=helps[name], description=helps[name]), name)
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Flag values as a partial config; unset flags are omitted."""
    o: dict = {}
    for key in ("seed", "out", "folds", "threads", "reps", "results", "kind", "query"):
        v = getattr(args, key, None)
        if v is not None:
            o[key] = v
    if getattr(args, "lam", None):
        o["lambda"] = C.parse_grid(args.lam)
    if getattr(args, "log_lam", None):
        o["log_lambda"] = C.parse_grid(args.log_lam)
    if getattr(args, "nuisance", None):
        o["nuisance"] = C.NUISANCE_PRESETS[args.nuisance]
    if getattr(args, "second_stage", None):
        o["second_stage"] = C.SECOND_STAGE_PRESETS[args.second_stage]
    data = {}
    if getattr(args, "input", None):
        data.update(kind="csv", path=args.input)
    for key in ("treatment", "outcome"):
        if getattr(args, key, None):
            data[key] = getattr(args, key)
    if data:
        o["data"] = data
    return o


def _write_outputs(out: Path, table: ResultsTable) -> None:
    table.write_csv(out / "results.csv")
    for name, text in getattr(table, "extras", {}).items():
        atomic_write(out / name, text)


def run(cfg: dict) -> None:
    out = Path(cfg["out"])
    cfg_text = C.dump_yaml(cfg)
    command = cfg["command"]
    if command == "simulate":
        _write_outputs(out, cmd_simulate(cfg))
    elif command == "defer":
        _write_outputs(out, cmd_defer(cfg))
    elif command == "sweep":
        _write_outputs(out, cmd_sweep(cfg))
    elif command == "estimate":
        b = cmd_estimate(cfg)
        write_bounds_csv(out / "bounds.csv", b.lower, b.upper, b.lam, sha256_text(cfg_text), b.row_ids)
    elif command == "plot":
        results = ResultsTable.read_csv(cfg["results"])
        for path in emit_plots(results, cfg.get("kind"), out):
            log.info("wrote %s", path)
    atomic_write(out / "config.yaml", cfg_text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = C.load_yaml(args.config) if args.config else {}
        cfg = C.resolve(args.command, file_cfg, overrides_from_args(args))
    except (C.ConfigError, SensitivityError, FoldError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run(cfg)
    except (C.ConfigError, SensitivityError, FoldError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CrossFitError, EmptyResultsError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, IRLSDivergenceError, PropensityContractError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {cfg['out']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
