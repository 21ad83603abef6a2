"""Two-stage estimation of sharp CATE bounds.

First stage: cross-fitted nuisances (propensity, per-arm outcome
distribution) evaluated on held-out folds and turned into bound
pseudo-outcomes.  Second stage: regress the pseudo-outcomes on covariates,
either by empirical risk minimization with a smoother or with a split-sample
linear smoother.  Plug-in and oracle comparators live here as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .domain import (
    BoundPair,
    Dataset,
    FoldAssignment,
    SensitivityParams,
    SingleArmError,
    assign_folds,
    validate_dataset,
)
from .learners import (
    PropensityModel,
    QuantileCvarModel,
    RegressedRhoModel,
    SmootherRegression,
    SmootherSpec,
    fit_mean_regression,
    fit_propensity,
    fit_quantile_cvar,
    fit_regressed_rho,
    make_smoother,
)
from .pseudo import NuisanceEval, PseudoOutcomes, phi_sample

log = logging.getLogger(__name__)

SIDES = ("upper", "lower")


class CrossFitError(RuntimeError):
    pass


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic child seed for ``(base, *keys)``."""
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class NuisanceSpec:
    """How first-stage nuisances are learned.

    ``propensity`` is ``"logistic"``, ``"forest"`` or ``"kernel"``;
    ``rho_route`` is ``"cvar"`` (mean and CVaR from one smoother) or
    ``"regress"`` (regress the ``R`` pseudo-outcome with nested splitting).
    """

    outcome: SmootherSpec = SmootherSpec("forest")
    propensity: str = "forest"
    propensity_smoother: Optional[SmootherSpec] = None
    clip_eps: float = 0.01
    rho_route: str = "cvar"

    def propensity_spec(self):
        if self.propensity == "logistic":
            return "logistic"
        base = self.propensity_smoother or self.outcome
        return base.with_kind(self.propensity)


@dataclass(frozen=True)
class SecondStageSpec:
    """Second-stage learner; ``mode`` is ``"erm"`` or ``"smoother"`` (split-sample)."""

    smoother: SmootherSpec = SmootherSpec("forest")
    mode: str = "erm"


@dataclass(frozen=True)
class BLearnerConfig:
    nuisance: NuisanceSpec = NuisanceSpec()
    second_stage: SecondStageSpec = SecondStageSpec()
    folds: int = 5
    fold_scheme: str = "modular"
    seed: int = 0
    sides: tuple = SIDES
    clamp: bool = False


# --- nuisances ----------------------------------------------------------------

@dataclass
class FoldNuisance:
    """Nuisance models of one fold, trained on the fold's complement."""

    fold: int
    train_idx: np.ndarray
    propensity: PropensityModel
    arms: dict

    def evaluate(self, X, s: SensitivityParams) -> NuisanceEval:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        e = self.propensity.predict_e(X)
        per_arm = {a: self.arms[a].predict_rho(X, s) for a in (0, 1)}
        return NuisanceEval(
            e=e, mu1=per_arm[1]["mu"], mu0=per_arm[0]["mu"],
            q_plus_1=per_arm[1]["q_plus"], q_minus_1=per_arm[1]["q_minus"],
            q_plus_0=per_arm[0]["q_plus"], q_minus_0=per_arm[0]["q_minus"],
            rho_plus_1=per_arm[1]["rho_plus"], rho_minus_1=per_arm[1]["rho_minus"],
            rho_plus_0=per_arm[0]["rho_plus"], rho_minus_0=per_arm[0]["rho_minus"],
        )


def fit_fold_nuisance(ds: Dataset, spec: NuisanceSpec, s: SensitivityParams, seed: int,
                      fold: int = -1, train_idx: Optional[np.ndarray] = None) -> FoldNuisance:
    """Fit propensity and both arms' outcome models on ``ds``."""
    e_model = fit_propensity(ds, spec.propensity_spec(), spec.clip_eps, seed=derive_seed(seed, 0))
    arms = {}
    for a in (0, 1):
        arm_seed = derive_seed(seed, 1 + a)
        if spec.rho_route == "cvar":
            arms[a] = fit_quantile_cvar(ds, a, spec.outcome, s, seed=arm_seed)
        elif spec.rho_route == "regress":
            arms[a] = fit_regressed_rho(ds, a, spec.outcome, s, seed=arm_seed)
        else:
            raise ValueError(f"unknown rho route {spec.rho_route!r}")
    if train_idx is None:
        train_idx = np.arange(ds.n)
    return FoldNuisance(fold, np.asarray(train_idx), e_model, arms)


@dataclass
class NuisanceSet:
    folds: FoldAssignment
    models: list

    def heldout_eval(self, X, s: SensitivityParams) -> tuple:
        """Evaluate each sample with its own fold's models.

        Returns the packed :class:`NuisanceEval` and, per sample, the index of
        the fold model used.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        parts = {}
        used = np.full(n, -1, dtype=np.int64)
        for fm in self.models:
            idx = self.folds.eval_idx(fm.fold)
            parts[fm.fold] = (idx, fm.evaluate(X[idx], s))
            used[idx] = fm.fold
        cols = {}
        for name in NuisanceEval.__dataclass_fields__:
            arr = np.empty(n)
            for idx, ev in parts.values():
                arr[idx] = getattr(ev, name)
            cols[name] = arr
        return NuisanceEval(**cols), used


def fit_nuisance_set(ds: Dataset, spec: NuisanceSpec, s: SensitivityParams, folds: FoldAssignment,
                     seed: int = 0) -> NuisanceSet:
    if folds.n != ds.n:
        raise CrossFitError(f"fold assignment covers {folds.n} samples, dataset has {ds.n}")
    models = []
    for k in range(folds.K):
        train = folds.train_idx(k)
        sub = ds.subset(train)
        n1 = int(np.sum(sub.A == 1))
        if n1 == 0 or n1 == sub.n:
            raise CrossFitError(f"training complement of fold {k} is missing a treatment arm")
        try:
            models.append(fit_fold_nuisance(sub, spec, s, derive_seed(seed, k), k, train))
        except SingleArmError as exc:
            raise CrossFitError(f"fold {k}: {exc}") from exc
    return NuisanceSet(folds, models)


def crossfit_pseudo(ds: Dataset, s: SensitivityParams, nuisance_spec: NuisanceSpec = NuisanceSpec(),
                    folds: Optional[FoldAssignment] = None, seed: int = 0,
                    nuisances: Optional[NuisanceSet] = None) -> tuple:
    """Cross-fitted pseudo-outcomes.

    Each sample's pseudo-outcomes use only models whose training set excluded
    it.  A previously fitted ``nuisances`` set may be re-evaluated at a new
    sensitivity level, which is how sensitivity sweeps avoid refitting.
    """
    validate_dataset(ds, require_both_arms=True)
    if nuisances is None:
        folds = folds or assign_folds(ds.n, 5)
        nuisances = fit_nuisance_set(ds, nuisance_spec, s, folds, seed)
    ev, _ = nuisances.heldout_eval(ds.X, s)
    return phi_sample(ev, ds.A.astype(float), ds.Y, s), nuisances


# --- second stage -------------------------------------------------------------

def second_stage_erm(X, phi, spec: SmootherSpec = SmootherSpec("forest"), seed: int = 0) -> SmootherRegression:
    """Least-squares fit of ``phi`` on ``X`` within the smoother's hypothesis class."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phi = np.asarray(phi, dtype=float)
    if X.shape[0] != phi.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows, phi has {phi.shape[0]}")
    return fit_mean_regression(X, phi, spec, seed)


def second_stage_smoother(X_weights_half, X_phi_half, phi, spec: SmootherSpec = SmootherSpec("kernel"),
                          seed: int = 0, phi_weights_half=None) -> SmootherRegression:
    """Linear smoother whose weights are learned on a separate half.

    The smoother structure (kernel scaling and bandwidth, or forest
    partitions grown on ``phi_weights_half``) comes from the first half; the
    weights are then spread over the second half and average its ``phi``.
    """
    X_w = np.atleast_2d(np.asarray(X_weights_half, dtype=float))
    X_p = np.atleast_2d(np.asarray(X_phi_half, dtype=float))
    phi = np.asarray(phi, dtype=float)
    if X_w.shape[0] < 10 or X_p.shape[0] < 10:
        raise ValueError("each half needs at least 10 samples")
    if X_p.shape[0] != phi.shape[0]:
        raise ValueError("phi must align with X_phi_half")
    smoother = make_smoother(spec, seed).fit(X_w, phi_weights_half)
    return SmootherRegression(smoother.reindex(X_p), phi)


# --- bound functions ----------------------------------------------------------

class BoundFunction:
    """Fitted ``x -> (lower, upper)`` map.

    A missing side (when only one side was requested) predicts ``nan``.
    """

    def __init__(self, upper, lower, lam: float, meta: Optional[dict] = None, clamp: bool = False):
        self.upper_model = upper
        self.lower_model = lower
        self.lam = lam
        self.meta = meta or {}
        self.clamp = clamp

    def _side(self, model, X):
        if model is None:
            return np.full(X.shape[0], np.nan)
        return model.predict(X)

    def predict(self, X) -> BoundPair:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        upper = self._side(self.upper_model, X)
        lower = self._side(self.lower_model, X)
        if self.clamp:
            lower = np.minimum(lower, upper)
        return BoundPair(lower=lower, upper=upper)


def _fit_second_stages(X, po: PseudoOutcomes, stage: SecondStageSpec, seed: int, sides) -> dict:
    models = {"upper": None, "lower": None}
    if stage.mode == "erm":
        for side in sides:
            phi = po.phi_tau_upper if side == "upper" else po.phi_tau_lower
            models[side] = second_stage_erm(X, phi, stage.smoother, seed)
    elif stage.mode == "smoother":
        n = X.shape[0]
        perm = np.random.default_rng(derive_seed(seed, 99)).permutation(n)
        h1, h2 = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
        for side in sides:
            phi = po.phi_tau_upper if side == "upper" else po.phi_tau_lower
            models[side] = second_stage_smoother(X[h1], X[h2], phi[h2], stage.smoother, seed,
                                                 phi_weights_half=phi[h1])
    else:
        raise ValueError(f"unknown second-stage mode {stage.mode!r}")
    return models


def fit_blearner(ds: Dataset, s: SensitivityParams, config: BLearnerConfig = BLearnerConfig(),
                 nuisances: Optional[NuisanceSet] = None) -> BoundFunction:
    """Cross-fit pseudo-outcomes, then regress them on covariates."""
    validate_dataset(ds, require_both_arms=True)
    folds = assign_folds(ds.n, config.folds, config.fold_scheme, config.seed)
    po, nuisances = crossfit_pseudo(ds, s, config.nuisance, folds, derive_seed(config.seed, 1), nuisances)
    models = _fit_second_stages(ds.X, po, config.second_stage, derive_seed(config.seed, 2), config.sides)
    meta = {"estimator": "blearner", "lambda": s.lam, "folds": config.folds,
            "fold_scheme": config.fold_scheme, "seed": config.seed}
    bf = BoundFunction(models["upper"], models["lower"], s.lam, meta, config.clamp)
    bf.pseudo_outcomes = po
    bf.nuisances = nuisances
    return bf


class PluginBound(BoundFunction):
    """Nuisances substituted directly into the sharp-bound formulas."""

    def __init__(self, nuisance: FoldNuisance, s: SensitivityParams, meta: Optional[dict] = None,
                 clamp: bool = False):
        super().__init__(None, None, s.lam, meta, clamp)
        self.nuisance = nuisance
        self.s = s

    def predict(self, X) -> BoundPair:
        ev = self.nuisance.evaluate(X, self.s)
        e = ev.e
        upper = (e * ev.mu1 + (1 - e) * ev.rho_plus_1) - ((1 - e) * ev.mu0 + e * ev.rho_minus_0)
        lower = (e * ev.mu1 + (1 - e) * ev.rho_minus_1) - ((1 - e) * ev.mu0 + e * ev.rho_plus_0)
        if self.clamp:
            lower = np.minimum(lower, upper)
        return BoundPair(lower=lower, upper=upper)


def fit_plugin(ds: Dataset, s: SensitivityParams, config: BLearnerConfig = BLearnerConfig()) -> PluginBound:
    """Plug-in comparator with nuisances fit once on the full sample."""
    validate_dataset(ds, require_both_arms=True)
    nuisance = fit_fold_nuisance(ds, config.nuisance, s, derive_seed(config.seed, 1))
    return PluginBound(nuisance, s, {"estimator": "plugin", "lambda": s.lam, "seed": config.seed}, config.clamp)


def fit_oracle(ds: Dataset, s: SensitivityParams, oracle_nuisances: Callable[[np.ndarray, SensitivityParams], NuisanceEval],
               second_stage: SecondStageSpec = SecondStageSpec(), seed: int = 0,
               sides: Sequence[str] = SIDES) -> BoundFunction:
    """Second stage on pseudo-outcomes built from the true nuisances."""
    ev = oracle_nuisances(ds.X, s)
    po = phi_sample(ev, ds.A.astype(float), ds.Y, s)
    models = _fit_second_stages(ds.X, po, second_stage, derive_seed(seed, 2), sides)
    bf = BoundFunction(models["upper"], models["lower"], s.lam, {"estimator": "oracle", "lambda": s.lam, "seed": seed})
    bf.pseudo_outcomes = po
    return bf
