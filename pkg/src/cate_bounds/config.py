"""Run configuration: YAML files, flag overrides, validation and echo."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import yaml

from .blearner import BLearnerConfig, NuisanceSpec, SecondStageSpec
from .dgp import ConfoundedConfig
from .learners import SmootherSpec


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


COMMANDS = ("simulate", "defer", "sweep", "estimate", "plot")

SMOOTHER_KEYS = {"kind", "n_estimators", "max_depth", "min_samples_leaf", "max_features", "length_scale"}
NUISANCE_KEYS = {"outcome", "propensity", "propensity_smoother", "clip_eps", "rho_route"}
SECOND_STAGE_KEYS = SMOOTHER_KEYS | {"mode"}
DATA_KEYS = {"kind", "path", "n", "log_lambda_star", "confounder_effect", "cate_shift", "cate_scale", "treatment", "outcome",
             "y0", "y1", "counterfactual", "exclude"}

COMMON_KEYS = {"command", "seed", "out", "threads", "log_lambda", "lambda", "folds", "fold_scheme",
               "nuisance", "second_stage", "sides", "clamp"}
COMMAND_KEYS = {
    "simulate": {"n_grid", "reps", "n_test", "test_seed", "variants"},
    "defer": {"data", "reps", "n_test", "test_fraction", "deferral_step"},
    "sweep": {"data", "include_dr"},
    "estimate": {"data", "query"},
    "plot": {"results", "kind"},
}

DEFAULT_LOG_LAMBDA = {
    "simulate": [1.0],
    "defer": [1.0],
    "sweep": [round(0.1 * k, 10) for k in range(1, 11)],
    "estimate": [1.0],
    "plot": [],
}


def default_config(command: str) -> dict:
    """Fully populated default configuration for ``command``."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    cfg: dict = {
        "command": command,
        "seed": 0,
        "out": f"results/{command}",
        "threads": 1,
        "log_lambda": list(DEFAULT_LOG_LAMBDA[command]),
        "folds": 5,
        "fold_scheme": "modular",
        "nuisance": {
            "outcome": smoother_dict(SmootherSpec("forest")),
            "propensity": "forest",
            "propensity_smoother": None,
            "clip_eps": 0.01,
            "rho_route": "cvar",
        },
        "second_stage": {"mode": "erm", **smoother_dict(SmootherSpec("forest"))},
        "sides": ["upper", "lower"],
        "clamp": False,
    }
    synthetic = {"kind": "confounded", "n": 2000, "log_lambda_star": 1.0, "confounder_effect": 1.0,
                 "cate_shift": 0.0, "cate_scale": 1.0}
    if command == "simulate":
        cfg.update(n_grid=[100 * 2 ** k for k in range(8)], reps=20, n_test=400, test_seed=2023,
                   variants=["blearner", "oracle", "plugin"])
    elif command == "defer":
        cfg.update(data=synthetic, reps=10, n_test=1000, test_fraction=0.2, deferral_step=0.05)
    elif command == "sweep":
        # constant small positive effect: lower bounds cross zero gradually along the grid
        cfg.update(data={**synthetic, "cate_shift": 0.15, "cate_scale": 0.0, "confounder_effect": 0.5},
                   include_dr=True)
    elif command == "estimate":
        cfg.update(data={"kind": "csv", "path": None, "treatment": "treatment", "outcome": "outcome"}, query=None)
    elif command == "plot":
        cfg = {"command": "plot", "out": "results/plots", "results": None, "kind": None}
    return cfg


def smoother_dict(spec: SmootherSpec) -> dict:
    return {"kind": spec.kind, "n_estimators": spec.n_estimators, "max_depth": spec.max_depth,
            "min_samples_leaf": spec.min_samples_leaf, "max_features": spec.max_features,
            "length_scale": spec.length_scale}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


def parse_grid(text: str) -> list:
    """``"0.1,0.2"`` or ``"1.0"`` or ``"0.1:1.0:0.1"`` (inclusive range)."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, step = (float(t) for t in text.split(":"))
            if step <= 0:
                raise ConfigError(f"grid step must be positive in {text!r}")
            k = int(math.floor((hi - lo) / step + 1e-9))
            return [round(lo + i * step, 12) for i in range(k + 1)]
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse grid {text!r}") from exc


def resolve(command: str, file_cfg: Optional[dict] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the file, then flag overrides; validated."""
    cfg = default_config(command)
    for src, label in ((file_cfg or {}, "config"), (overrides or {}, "flags")):
        _check_keys(src, COMMON_KEYS | COMMAND_KEYS[command], label)
        if "command" in src and src["command"] != command:
            raise ConfigError(f"{label}: command {src['command']!r} does not match {command!r}")
        src = dict(src)
        if "lambda" in src:
            if "log_lambda" in src:
                raise ConfigError(f"{label}: give either lambda or log_lambda, not both")
            lams = _as_list(src.pop("lambda"))
            if any(not isinstance(v, (int, float)) or v < 1 for v in lams):
                raise ConfigError(f"{label}: lambda values must be numbers >= 1")
            src["log_lambda"] = [math.log(float(v)) for v in lams]
        if "log_lambda" in src:
            src["log_lambda"] = [float(v) for v in _as_list(src["log_lambda"])]
        cfg = _merge(cfg, src, label)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    command = cfg["command"]
    if command == "plot":
        if not cfg.get("results"):
            raise ConfigError("plot: 'results' (path to a results CSV) is required")
        return
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    if not isinstance(cfg["folds"], int) or cfg["folds"] < 2:
        raise ConfigError("folds must be an integer >= 2")
    if cfg["fold_scheme"] not in ("modular", "shuffled"):
        raise ConfigError("fold_scheme must be 'modular' or 'shuffled'")
    if not cfg["log_lambda"]:
        raise ConfigError("log_lambda grid is empty")
    if any((not math.isfinite(v)) or v < 0 for v in cfg["log_lambda"]):
        raise ConfigError("log_lambda values must be finite and >= 0")
    sides = cfg["sides"]
    if not sides or any(s not in ("upper", "lower") for s in sides) or len(set(sides)) != len(sides):
        raise ConfigError("sides must be a non-empty subset of [upper, lower]")
    nuisance_spec(cfg)
    second_stage_spec(cfg["second_stage"], "second_stage")
    if "data" in cfg:
        _check_keys(cfg["data"], DATA_KEYS, "data")
        kind = cfg["data"].get("kind")
        if kind not in ("confounded", "synthetic", "csv"):
            raise ConfigError("data.kind must be 'confounded', 'synthetic' or 'csv'")
        if kind == "csv" and not cfg["data"].get("path"):
            raise ConfigError("data.path is required for csv input")
        if kind != "csv":
            n = cfg["data"].get("n")
            if not isinstance(n, int) or n < 4 * cfg["folds"]:
                raise ConfigError(f"data.n must be an integer >= {4 * cfg['folds']}")
    if command == "simulate":
        grid = cfg["n_grid"]
        if not grid or any(not isinstance(n, int) or n < 2 * cfg["folds"] for n in grid):
            raise ConfigError(f"n_grid entries must be integers >= {2 * cfg['folds']}")
        if len(set(grid)) != len(grid):
            raise ConfigError("n_grid has duplicates")
        if not isinstance(cfg["reps"], int) or cfg["reps"] < 1:
            raise ConfigError("reps must be a positive integer")
        if not isinstance(cfg["n_test"], int) or cfg["n_test"] < 1:
            raise ConfigError("n_test must be a positive integer")
        variants(cfg)
    if command == "defer":
        if not isinstance(cfg["reps"], int) or cfg["reps"] < 1:
            raise ConfigError("reps must be a positive integer")
        step = cfg["deferral_step"]
        if not (0 < step <= 1) or abs(round(1 / step) * step - 1) > 1e-9:
            raise ConfigError("deferral_step must divide 1 evenly")
        if not (0 < cfg["test_fraction"] < 1):
            raise ConfigError("test_fraction must lie in (0, 1)")
    if command in ("estimate", "defer") and len(cfg["log_lambda"]) != 1:
        raise ConfigError(f"{command} takes a single sensitivity level, got {len(cfg['log_lambda'])}")


def smoother_spec(d: dict, where: str) -> SmootherSpec:
    _check_keys(d, SMOOTHER_KEYS, where)
    kind = d.get("kind", "forest")
    if kind not in ("forest", "kernel"):
        raise ConfigError(f"{where}.kind must be 'forest' or 'kernel'")
    mf = d.get("max_features")
    if mf is not None and mf != "third" and not isinstance(mf, (int, float)):
        raise ConfigError(f"{where}.max_features must be null, 'third', an int or a fraction")
    n_est = d.get("n_estimators", 100)
    if not isinstance(n_est, int) or n_est < 1:
        raise ConfigError(f"{where}.n_estimators must be a positive integer")
    msl = d.get("min_samples_leaf", 0.05)
    if not isinstance(msl, (int, float)) or msl <= 0:
        raise ConfigError(f"{where}.min_samples_leaf must be positive")
    ls = d.get("length_scale")
    if ls is not None and (not isinstance(ls, (int, float)) or ls <= 0):
        raise ConfigError(f"{where}.length_scale must be positive")
    return SmootherSpec(kind=kind, n_estimators=n_est, max_depth=d.get("max_depth", 6), min_samples_leaf=msl,
                        max_features=mf, length_scale=ls)


def second_stage_spec(d: dict, where: str) -> SecondStageSpec:
    _check_keys(d, SECOND_STAGE_KEYS, where)
    mode = d.get("mode", "erm")
    if mode not in ("erm", "smoother"):
        raise ConfigError(f"{where}.mode must be 'erm' or 'smoother'")
    return SecondStageSpec(smoother=smoother_spec({k: v for k, v in d.items() if k != "mode"}, where), mode=mode)


def nuisance_spec(cfg: dict) -> NuisanceSpec:
    d = cfg["nuisance"]
    _check_keys(d, NUISANCE_KEYS, "nuisance")
    if d["propensity"] not in ("forest", "kernel", "logistic"):
        raise ConfigError("nuisance.propensity must be 'forest', 'kernel' or 'logistic'")
    if d["rho_route"] not in ("cvar", "regress"):
        raise ConfigError("nuisance.rho_route must be 'cvar' or 'regress'")
    if not (0 < d["clip_eps"] < 0.5):
        raise ConfigError("nuisance.clip_eps must lie in (0, 0.5)")
    ps = d.get("propensity_smoother")
    return NuisanceSpec(outcome=smoother_spec(d["outcome"], "nuisance.outcome"), propensity=d["propensity"],
                        propensity_smoother=None if ps is None else smoother_spec(ps, "nuisance.propensity_smoother"),
                        clip_eps=float(d["clip_eps"]), rho_route=d["rho_route"])


def blearner_config(cfg: dict, seed: int, second_stage: Optional[SecondStageSpec] = None) -> BLearnerConfig:
    return BLearnerConfig(nuisance=nuisance_spec(cfg),
                          second_stage=second_stage or second_stage_spec(cfg["second_stage"], "second_stage"),
                          folds=cfg["folds"], fold_scheme=cfg["fold_scheme"], seed=seed,
                          sides=tuple(cfg["sides"]), clamp=bool(cfg["clamp"]))


@dataclass(frozen=True)
class Variant:
    name: str
    estimator: str
    second_stage: SecondStageSpec


def variants(cfg: dict) -> list:
    """Estimator variants of a simulation config.

    An entry is an estimator name or a mapping with ``estimator`` and
    optional ``name`` and ``second_stage`` overrides.
    """
    base = cfg["second_stage"]
    out = []
    for i, v in enumerate(cfg["variants"]):
        if isinstance(v, str):
            v = {"estimator": v}
        _check_keys(v, {"estimator", "name", "second_stage"}, f"variants[{i}]")
        est = v.get("estimator")
        if est not in ("blearner", "oracle", "plugin"):
            raise ConfigError(f"variants[{i}].estimator must be blearner, oracle or plugin")
        stage = second_stage_spec(_merge(base, v.get("second_stage") or {}, "variants"), f"variants[{i}].second_stage")
        out.append(Variant(v.get("name", est), est, stage))
    names = [v.name for v in out]
    if not out or len(set(names)) != len(names):
        raise ConfigError("variants must be non-empty with unique names")
    return out


def confounded_config(data: dict) -> ConfoundedConfig:
    return ConfoundedConfig(lambda_star=math.exp(float(data.get("log_lambda_star", 1.0))),
                            confounder_effect=float(data.get("confounder_effect", 1.0)),
                            cate_shift=float(data.get("cate_shift", 0.0)),
                            cate_scale=float(data.get("cate_scale", 1.0)))


# --- flags and files ------------------------------------------------------------

NUISANCE_PRESETS = {
    "forest": {"outcome": {"kind": "forest"}, "propensity": "forest"},
    "kernel": {"outcome": {"kind": "kernel"}, "propensity": "kernel"},
    "logistic-e": {"propensity": "logistic"},
}
SECOND_STAGE_PRESETS = {
    "forest": {"mode": "erm", "kind": "forest"},
    "kernel": {"mode": "erm", "kind": "kernel"},
    "smoother": {"mode": "smoother", "kind": "kernel"},
}


def load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def dump_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)
