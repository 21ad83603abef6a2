"""First-stage nuisance learners built on sample-weighting smoothers.

A smoother maps a query point ``x`` to a probability vector over its training
rows.  Means, quantiles and CVaR of an arm's outcome are all read off the same
weighted empirical distribution, so for a given ``x`` they are mutually
consistent (``CVaR_- <= mu <= CVaR_+``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Union

import numpy as np
from scipy.special import expit

from . import _cart
from ._cart import CartForest
from .domain import LOWER, UPPER, BoundSide, Dataset, SensitivityParams, SingleArmError

_CUM_TOL = 1e-12
_SIMPLEX_TOL = 1e-6
_CHUNK_ENTRIES = 4_000_000
_SIDE_KEY = {UPPER: "plus", LOWER: "minus"}


class WeightError(ValueError):
    pass


class IRLSDivergenceError(RuntimeError):
    pass


def _check_simplex(weights: np.ndarray) -> None:
    if np.any(weights < 0):
        raise WeightError("weights must be nonnegative")
    total = weights.sum()
    if abs(total - 1.0) > _SIMPLEX_TOL:
        raise WeightError(f"weights must sum to 1, got {total:.9g}")


def weighted_quantile(values, weights, c: float) -> float:
    """Smallest support point whose weighted CDF reaches ``c``."""
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if values.size == 0:
        raise WeightError("empty input")
    if values.shape != weights.shape:
        raise WeightError("values and weights differ in length")
    _check_simplex(weights)
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    idx = min(int(np.searchsorted(cum, c - _CUM_TOL, side="left")), values.size - 1)
    return float(values[order][idx])


def weighted_cvar(values, weights, q: float, side: BoundSide, s: SensitivityParams) -> float:
    """``q + (lam + 1) * sum_i w_i {v_i - q}_side``."""
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if values.size == 0:
        raise WeightError("empty input")
    _check_simplex(weights)
    return float(q + s.tail_factor * np.dot(weights, side.hinge(values - q)))


def _row_quantiles(sorted_values: np.ndarray, W_sorted: np.ndarray, c: float) -> np.ndarray:
    # W_sorted columns follow sorted_values; rows sum to one
    cum = np.cumsum(W_sorted, axis=1)
    idx = np.minimum((cum < c - _CUM_TOL).sum(axis=1), sorted_values.size - 1)
    return sorted_values[idx]


# --- smoothers ----------------------------------------------------------------

class WeightSmoother:
    """Base class: ``weights(Xq)[i]`` is a probability vector over training rows."""

    n_train: int = 0

    def fit(self, X, y=None) -> "WeightSmoother":
        raise NotImplementedError

    def weights(self, Xq) -> np.ndarray:
        raise NotImplementedError

    def reindex(self, X_pool) -> "WeightSmoother":
        """Same fitted structure, weights spread over the rows of ``X_pool``."""
        raise NotImplementedError

    def iter_weights(self, Xq) -> Iterator[tuple]:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        step = max(1, _CHUNK_ENTRIES // max(self.n_train, 1))
        for start in range(0, Xq.shape[0], step):
            sl = slice(start, min(start + step, Xq.shape[0]))
            yield sl, self.weights(Xq[sl])

    def predict(self, Xq, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=float)
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        out = np.empty(Xq.shape[0])
        for sl, W in self.iter_weights(Xq):
            out[sl] = W @ targets
        return out

    def outcome_stats(self, Xq, y, order, s: SensitivityParams) -> dict:
        """Weighted mean, tail quantiles and CVaRs of ``y`` at each query row.

        ``order`` sorts ``y`` ascending.
        """
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        n = Xq.shape[0]
        out = {k: np.empty(n) for k in ("mu", "q_plus", "q_minus", "cvar_plus", "cvar_minus")}
        ys = np.asarray(y, dtype=float)[order]
        for sl, W in self.iter_weights(Xq):
            Ws = W[:, order]
            out["mu"][sl] = Ws @ ys
            for side in (UPPER, LOWER):
                key = _SIDE_KEY[side]
                q = _row_quantiles(ys, Ws, s.quantile_level(side))
                out[f"q_{key}"][sl] = q
                hinge = side.hinge(ys[None, :] - q[:, None])
                out[f"cvar_{key}"][sl] = q + s.tail_factor * np.einsum("ij,ij->i", Ws, hinge)
        return out


def default_length_scale(m: int, d: int) -> float:
    return 0.9 * m ** (-1.0 / (4.0 + d))


class KernelSmoother(WeightSmoother):
    """Gaussian-kernel (Nadaraya-Watson) weights on standardized covariates.

    The default length scale is ``0.9 * m ** (-1 / (4 + d))`` in units of the
    training standard deviation of each column.
    """

    def __init__(self, length_scale: Optional[float] = None):
        self.length_scale = length_scale

    def fit(self, X, y=None) -> "KernelSmoother":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m, d = X.shape
        if m < 1:
            raise WeightError("cannot fit a smoother on zero rows")
        self.center_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        self.length_scale_ = self.length_scale if self.length_scale is not None else default_length_scale(m, d)
        self._set_pool(X)
        return self

    def _set_pool(self, X):
        self.Z_ = (X - self.center_) / self.scale_
        self.z_sq_ = np.einsum("ij,ij->i", self.Z_, self.Z_)
        self.n_train = X.shape[0]

    def weights(self, Xq) -> np.ndarray:
        Zq = (np.atleast_2d(np.asarray(Xq, dtype=float)) - self.center_) / self.scale_
        d2 = np.einsum("ij,ij->i", Zq, Zq)[:, None] + self.z_sq_[None, :] - 2.0 * Zq @ self.Z_.T
        np.maximum(d2, 0.0, out=d2)
        logits = d2 * (-0.5 / self.length_scale_ ** 2)
        logits -= logits.max(axis=1, keepdims=True)
        W = np.exp(logits)
        W /= W.sum(axis=1, keepdims=True)
        return W

    def reindex(self, X_pool) -> "KernelSmoother":
        other = KernelSmoother(self.length_scale)
        other.center_, other.scale_, other.length_scale_ = self.center_, self.scale_, self.length_scale_
        other._set_pool(np.atleast_2d(np.asarray(X_pool, dtype=float)))
        return other


class ForestSmoother(WeightSmoother):
    """Random-forest leaf co-membership weights.

    Trees are CART regression trees grown on bootstrap resamples with
    variance-reduction splits.  ``weights(x)[i]`` averages
    ``1{i in leaf(x)} / |leaf(x)|`` over trees, counting original (not
    bootstrap) rows in each leaf.  Trees whose leaf holds no pool row (only
    possible after :meth:`reindex`) are skipped for that query.
    """

    def __init__(self, n_estimators: int = 100, max_depth: Optional[int] = 6,
                 min_samples_leaf: Union[int, float] = 0.05, max_features=None, seed: int = 0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.seed = seed

    def fit(self, X, y=None) -> "ForestSmoother":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if y is None:
            raise WeightError("forest smoother needs targets to grow its trees")
        self.forest_ = CartForest(self.n_estimators, self.max_depth, self.min_samples_leaf,
                                  self.max_features, self.seed).fit(X, np.asarray(y, dtype=float))
        self._set_pool(X)
        return self

    def _set_pool(self, X):
        leaves = self.forest_.apply(X)
        m, T = leaves.shape
        self.maps_ = []
        offset = 0
        cols = np.empty_like(leaves)
        for t, tree in enumerate(self.forest_.trees_):
            node_map = np.full(tree.node_count, -1, dtype=np.int64)
            used, inverse = np.unique(leaves[:, t], return_inverse=True)
            node_map[used] = np.arange(used.size) + offset
            self.maps_.append(node_map)
            cols[:, t] = inverse + offset
            offset += used.size
        self.n_leaves_ = offset
        self.train_cols_ = cols
        flat = cols.ravel()
        self.leaf_size_ = np.bincount(flat, minlength=offset).astype(float)
        order = np.argsort(flat, kind="stable")
        self.leaf_rows_ = (order // T).astype(np.int64)
        self.leaf_ptr_ = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=offset))]).astype(np.int64)
        self.n_train = m

    def _query_cols(self, Xq) -> np.ndarray:
        leaves = self.forest_.apply(Xq)
        cols = np.empty_like(leaves)
        for t, node_map in enumerate(self.maps_):
            cols[:, t] = node_map[leaves[:, t]]
        return cols

    def weights(self, Xq) -> np.ndarray:
        return _cart.dense_weights(self._query_cols(Xq), self.leaf_ptr_, self.leaf_rows_, self.n_train)

    def outcome_stats(self, Xq, y, order, s: SensitivityParams) -> dict:
        rank = np.empty(order.size, dtype=np.int64)
        rank[order] = np.arange(order.size)
        y_sorted = np.ascontiguousarray(np.asarray(y, dtype=float)[order])
        out = _cart.outcome_stats(self._query_cols(Xq), self.leaf_ptr_, rank[self.leaf_rows_], y_sorted,
                                  s.quantile_level(UPPER), s.quantile_level(LOWER), s.tail_factor, _CUM_TOL)
        return dict(zip(("mu", "q_plus", "q_minus", "cvar_plus", "cvar_minus"), out.T.copy()))

    def predict(self, Xq, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=float)
        T = self.train_cols_.shape[1]
        sums = np.bincount(self.train_cols_.ravel(), weights=np.repeat(targets, T), minlength=self.n_leaves_)
        means = sums / self.leaf_size_
        cols = self._query_cols(Xq)
        valid = cols >= 0
        vals = np.where(valid, means[np.where(valid, cols, 0)], 0.0)
        count = valid.sum(axis=1)
        out = vals.sum(axis=1) / np.maximum(count, 1)
        out[count == 0] = targets.mean()
        return out

    def reindex(self, X_pool) -> "ForestSmoother":
        other = ForestSmoother(self.n_estimators, self.max_depth, self.min_samples_leaf, self.max_features, self.seed)
        other.forest_ = self.forest_
        other._set_pool(np.atleast_2d(np.asarray(X_pool, dtype=float)))
        return other


@dataclass(frozen=True)
class SmootherSpec:
    """Hyperparameters of a smoother; ``kind`` is ``"forest"`` or ``"kernel"``."""

    kind: str = "forest"
    n_estimators: int = 100
    max_depth: Optional[int] = 6
    min_samples_leaf: Union[int, float] = 0.05
    max_features: Union[None, int, float, str] = None
    length_scale: Optional[float] = None

    def with_kind(self, kind: str) -> "SmootherSpec":
        return replace(self, kind=kind)


def make_smoother(spec: SmootherSpec, seed: int = 0) -> WeightSmoother:
    if spec.kind == "forest":
        return ForestSmoother(spec.n_estimators, spec.max_depth, spec.min_samples_leaf, spec.max_features, seed)
    if spec.kind == "kernel":
        return KernelSmoother(spec.length_scale)
    raise ValueError(f"unknown smoother kind {spec.kind!r}")


# --- regression ---------------------------------------------------------------

class SmootherRegression:
    """``predict(x) = sum_i weights(x)_i * targets_i``."""

    def __init__(self, smoother: WeightSmoother, targets):
        self.smoother = smoother
        self.targets = np.asarray(targets, dtype=float)

    def predict(self, Xq) -> np.ndarray:
        return self.smoother.predict(Xq, self.targets)


def fit_mean_regression(X, targets, spec: SmootherSpec = SmootherSpec(), seed: int = 0) -> SmootherRegression:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if X.shape[0] < 2:
        raise WeightError("mean regression needs at least 2 samples")
    return SmootherRegression(make_smoother(spec, seed).fit(X, targets), targets)


# --- propensity ---------------------------------------------------------------

class PropensityModel:
    clip_eps: float = 0.01

    def _raw(self, Xq) -> np.ndarray:
        raise NotImplementedError

    def predict_e(self, Xq) -> np.ndarray:
        return np.clip(self._raw(Xq), self.clip_eps, 1.0 - self.clip_eps)


class LogisticPropensity(PropensityModel):
    """Logistic regression with intercept fitted by iteratively reweighted least squares."""

    def __init__(self, clip_eps: float = 0.01, max_iter: int = 100, tol: float = 1e-8):
        self.clip_eps = clip_eps
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, A) -> "LogisticPropensity":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.asarray(A, dtype=float)
        Xd = np.column_stack([np.ones(X.shape[0]), X])
        beta = np.zeros(Xd.shape[1])
        for it in range(self.max_iter):
            p = expit(Xd @ beta)
            w = p * (1.0 - p)
            H = (Xd * w[:, None]).T @ Xd
            H[np.diag_indices_from(H)] += 1e-10
            step = np.linalg.solve(H, Xd.T @ (A - p))
            beta = beta + step
            if not np.all(np.isfinite(beta)):
                raise IRLSDivergenceError(f"IRLS produced non-finite coefficients at iteration {it}")
            if np.max(np.abs(step)) < self.tol:
                break
        else:
            raise IRLSDivergenceError(f"IRLS did not converge in {self.max_iter} iterations")
        self.coef_ = beta
        self.n_iter_ = it + 1
        return self

    def _raw(self, Xq) -> np.ndarray:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        return expit(self.coef_[0] + Xq @ self.coef_[1:])


class SmootherPropensity(PropensityModel):
    """Weighted treated share under a fitted smoother."""

    def __init__(self, smoother: WeightSmoother, A, clip_eps: float = 0.01):
        self.smoother = smoother
        self.A = np.asarray(A, dtype=float)
        self.clip_eps = clip_eps

    def _raw(self, Xq) -> np.ndarray:
        return self.smoother.predict(Xq, self.A)


def fit_propensity(ds: Dataset, spec: Union[str, SmootherSpec] = "forest", clip_eps: float = 0.01,
                   seed: int = 0) -> PropensityModel:
    """Fit ``P(A=1 | X)``; ``spec`` is ``"logistic"`` or a smoother spec/kind."""
    A = ds.A.astype(float)
    n1 = int(A.sum())
    if n1 == 0 or n1 == ds.n:
        raise SingleArmError("propensity model needs both treatment arms")
    if spec == "logistic":
        return LogisticPropensity(clip_eps).fit(ds.X, A)
    if isinstance(spec, str):
        spec = SmootherSpec(kind=spec)
    smoother = make_smoother(spec, seed).fit(ds.X, A)
    return SmootherPropensity(smoother, A, clip_eps)


# --- conditional outcome distribution -----------------------------------------


class QuantileCvarModel:
    """Weighted empirical outcome distribution of one arm.

    Mean, quantiles and CVaR at ``x`` share the weight vector ``weights(x)``.
    """

    def __init__(self, smoother: WeightSmoother, y, arm: int, s: SensitivityParams):
        self.smoother = smoother
        self.arm = arm
        self.s = s
        y = np.asarray(y, dtype=float)
        self.y = y
        self.order_ = np.argsort(y, kind="stable")
        self.y_sorted_ = y[self.order_]

    def predict_all(self, Xq, s: Optional[SensitivityParams] = None) -> dict:
        """``mu``, ``q_plus``, ``q_minus``, ``cvar_plus``, ``cvar_minus`` at each row."""
        return self.smoother.outcome_stats(Xq, self.y, self.order_, s or self.s)

    def predict_mu(self, Xq) -> np.ndarray:
        return self.smoother.predict(Xq, self.y)

    def predict_q(self, Xq, side: BoundSide, s: Optional[SensitivityParams] = None) -> np.ndarray:
        return self.predict_all(Xq, s)[f"q_{_SIDE_KEY[side]}"]

    def predict_cvar(self, Xq, side: BoundSide, s: Optional[SensitivityParams] = None) -> np.ndarray:
        return self.predict_all(Xq, s)[f"cvar_{_SIDE_KEY[side]}"]

    def predict_rho(self, Xq, s: Optional[SensitivityParams] = None) -> dict:
        """Quantiles, mean and modified regressions ``rho_plus``/``rho_minus``."""
        s = s or self.s
        out = self.predict_all(Xq, s)
        for key in ("plus", "minus"):
            out[f"rho_{key}"] = s.inv_lambda * out["mu"] + (1.0 - s.inv_lambda) * out[f"cvar_{key}"]
        return out


def fit_quantile_cvar(ds: Dataset, arm: int, smoother_spec: SmootherSpec, s: SensitivityParams,
                      seed: int = 0) -> QuantileCvarModel:
    sub = ds.arm(arm)
    if sub.n == 0:
        raise SingleArmError(f"no samples with A={arm}")
    smoother = make_smoother(smoother_spec, seed).fit(sub.X, sub.Y)
    return QuantileCvarModel(smoother, sub.Y, arm, s)


class RegressedRhoModel:
    """Modified regression learned by regressing the pseudo-outcome ``R``.

    Quantiles come from a smoother fit on one half of the arm's data; ``R`` is
    formed on the other half and regressed on covariates there.
    """

    def __init__(self, quantile_model: QuantileCvarModel, X_half, y_half, spec: SmootherSpec, seed: int):
        self.quantile_model = quantile_model
        self.X_half = np.atleast_2d(X_half)
        self.y_half = np.asarray(y_half, dtype=float)
        self.spec = spec
        self.seed = seed
        self.mu_model = fit_mean_regression(self.X_half, self.y_half, spec, seed)

    def predict_rho(self, Xq, s: SensitivityParams) -> dict:
        from .pseudo import r_value

        out = self.quantile_model.predict_all(Xq, s)
        qh = self.quantile_model.predict_all(self.X_half, s)
        out["mu"] = self.mu_model.predict(Xq)
        for side in (UPPER, LOWER):
            key = _SIDE_KEY[side]
            r = r_value(self.y_half, qh[f"q_{key}"], side, s)
            out[f"rho_{key}"] = fit_mean_regression(self.X_half, r, self.spec, self.seed).predict(Xq)
        return out


def fit_regressed_rho(ds: Dataset, arm: int, smoother_spec: SmootherSpec, s: SensitivityParams,
                      seed: int = 0) -> RegressedRhoModel:
    sub = ds.arm(arm)
    if sub.n < 4:
        raise SingleArmError(f"too few samples with A={arm} for nested splitting")
    perm = np.random.default_rng(seed).permutation(sub.n)
    h1, h2 = np.sort(perm[: sub.n // 2]), np.sort(perm[sub.n // 2:])
    qmodel = fit_quantile_cvar(sub.subset(h1), arm, smoother_spec, s, seed)
    return RegressedRhoModel(qmodel, sub.X[h2], sub.Y[h2], smoother_spec, seed)
