"""Core data types shared across the package.

Holds the observed-data container, the sensitivity parameter, the
upper/lower side convention and cross-fitting fold assignments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DatasetError(ValueError):
    """Base class for invalid observed data."""


class NonFiniteError(DatasetError):
    pass


class NonBinaryTreatmentError(DatasetError):
    pass


class SingleArmError(DatasetError):
    pass


class ConsistencyError(DatasetError):
    """Observed outcome disagrees with the potential outcome of its arm."""


class ShapeError(DatasetError):
    pass


class SensitivityError(ValueError):
    pass


class FoldError(ValueError):
    pass


class BoundSide(enum.Enum):
    UPPER = "+"
    LOWER = "-"

    @property
    def flipped(self) -> "BoundSide":
        return BoundSide.LOWER if self is BoundSide.UPPER else BoundSide.UPPER

    def hinge(self, b):
        """``max(b, 0)`` for the upper side, ``min(b, 0)`` for the lower side."""
        if self is BoundSide.UPPER:
            return np.maximum(b, 0.0)
        return np.minimum(b, 0.0)


UPPER = BoundSide.UPPER
LOWER = BoundSide.LOWER


@dataclass(frozen=True)
class SensitivityParams:
    """Odds-ratio bound ``lam`` of the marginal sensitivity model.

    ``alpha``, ``tail_factor`` and ``inv_lambda`` are derived on access so
    they can never drift from ``lam``.
    """

    lam: float

    @property
    def alpha(self) -> float:
        return self.lam / (self.lam + 1.0)

    @property
    def tail_factor(self) -> float:
        # 1 / (1 - alpha)
        return self.lam + 1.0

    @property
    def inv_lambda(self) -> float:
        return 1.0 / self.lam

    @property
    def log_lambda(self) -> float:
        return math.log(self.lam)

    def quantile_level(self, side: BoundSide) -> float:
        """Quantile level of the upper (``alpha``) or lower (``1 - alpha``) tail."""
        return self.alpha if side is BoundSide.UPPER else 1.0 / (self.lam + 1.0)


def make_sensitivity(lam: float) -> SensitivityParams:
    lam = float(lam)
    if not math.isfinite(lam) or lam < 1.0:
        raise SensitivityError(f"sensitivity level must be finite and >= 1, got {lam!r}")
    return SensitivityParams(lam)


def from_log_lambda(log_lam: float) -> SensitivityParams:
    return make_sensitivity(math.exp(log_lam))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed sample ``(X, A, Y)`` with optional simulation ground truth.

    ``Y0``/``Y1`` are potential outcomes and ``U`` the hidden confounder; they
    are only available for simulated data and never used for fitting.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    Y0: Optional[np.ndarray] = None
    Y1: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    columns: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", np.asarray(self.A).reshape(-1))
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=float).reshape(-1))
        for name in ("Y0", "Y1", "U"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).reshape(-1))
        for arr in (self.X, self.A, self.Y, self.Y0, self.Y1, self.U):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_potential_outcomes(self) -> bool:
        return self.Y0 is not None and self.Y1 is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return Dataset(self.X[idx], self.A[idx], self.Y[idx], pick(self.Y0), pick(self.Y1),
                       pick(self.U), self.columns)

    def arm(self, a: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.A == a))


def validate_dataset(ds: Dataset, require_both_arms: bool = False) -> None:
    """Raise a :class:`DatasetError` subclass if ``ds`` breaks an invariant."""
    X, A, Y = ds.X, ds.A, ds.Y
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ShapeError(f"X must be a non-empty 2-d matrix, got shape {X.shape}")
    n = X.shape[0]
    for name in ("A", "Y", "Y0", "Y1", "U"):
        v = getattr(ds, name)
        if v is not None and v.shape[0] != n:
            raise ShapeError(f"{name} has length {v.shape[0]}, expected {n}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("X contains non-finite entries")
    if not np.all(np.isfinite(Y)):
        raise NonFiniteError("Y contains non-finite entries")
    try:
        a_float = A.astype(float)
    except (TypeError, ValueError) as exc:
        raise NonBinaryTreatmentError("A is not numeric") from exc
    if not np.all(np.isfinite(a_float)):
        raise NonFiniteError("A contains non-finite entries")
    if not np.all((a_float == 0.0) | (a_float == 1.0)):
        bad = np.unique(a_float[(a_float != 0.0) & (a_float != 1.0)])
        raise NonBinaryTreatmentError(f"A must be 0/1, found {bad[:5].tolist()}")
    if require_both_arms:
        n1 = int(a_float.sum())
        if n1 == 0 or n1 == n:
            raise SingleArmError(f"only one treatment arm present ({n1} treated of {n})")
    if ds.has_potential_outcomes:
        for name in ("Y0", "Y1"):
            if not np.all(np.isfinite(getattr(ds, name))):
                raise NonFiniteError(f"{name} contains non-finite entries")
        expected = np.where(a_float == 1.0, ds.Y1, ds.Y0)
        if not np.array_equal(expected, Y):
            i = int(np.flatnonzero(expected != Y)[0])
            raise ConsistencyError(f"Y[{i}]={Y[i]!r} differs from Y{int(a_float[i])}[{i}]={expected[i]!r}")


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    n: int
    K: int
    fold_of: np.ndarray

    def eval_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def assign_folds(n: int, K: int = 5, scheme: str = "modular", seed: int = 0) -> FoldAssignment:
    """Partition ``range(n)`` into ``K`` folds.

    The modular scheme puts sample ``i`` in fold ``i mod K``; the shuffled
    scheme applies the same rule to a seeded permutation of the indices.
    """
    if K < 2 or K > n:
        raise FoldError(f"need 2 <= K <= n, got K={K}, n={n}")
    base = np.arange(n) % K
    if scheme == "modular":
        fold_of = base
    elif scheme == "shuffled":
        perm = np.random.default_rng(seed).permutation(n)
        fold_of = np.empty(n, dtype=np.int64)
        fold_of[perm] = base
    else:
        raise FoldError(f"unknown fold scheme {scheme!r}")
    fold_of = fold_of.astype(np.int64)
    fold_of.setflags(write=False)
    return FoldAssignment(n, K, fold_of)


@dataclass(frozen=True, eq=False)
class BoundPair:
    """Lower and upper CATE bounds, scalars or aligned arrays."""

    lower: np.ndarray
    upper: np.ndarray

    @property
    def width(self):
        return self.upper - self.lower
