"""Pseudo-outcome formulas for sharp CATE bounds.

Everything here is a pure function of numpy arrays (or scalars) and
broadcasts over samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import LOWER, UPPER, BoundSide, SensitivityParams


class PropensityContractError(RuntimeError):
    """Propensity outside (0, 1) reached the pseudo-outcome stage."""


def h_value(y, q, side: BoundSide, s: SensitivityParams):
    """CVaR pseudo-outcome ``q + (lam + 1) * {y - q}_side``."""
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    return q + s.tail_factor * side.hinge(y - q)


def r_value(y, q, side: BoundSide, s: SensitivityParams):
    """Unobserved-outcome pseudo-outcome ``y / lam + (1 - 1/lam) * H``."""
    y = np.asarray(y, dtype=float)
    return s.inv_lambda * y + (1.0 - s.inv_lambda) * h_value(y, q, side, s)


def rho_compose(mu, cvar, s: SensitivityParams):
    return s.inv_lambda * np.asarray(mu, dtype=float) + (1.0 - s.inv_lambda) * np.asarray(cvar, dtype=float)


@dataclass(frozen=True)
class NuisanceEval:
    """Nuisance values at one or many covariate points.

    ``q_plus_1`` is the upper-tail quantile of arm 1, ``rho_minus_0`` the
    lower modified regression of arm 0, and so on.
    """

    e: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    q_plus_1: np.ndarray
    q_minus_1: np.ndarray
    q_plus_0: np.ndarray
    q_minus_0: np.ndarray
    rho_plus_1: np.ndarray
    rho_minus_1: np.ndarray
    rho_plus_0: np.ndarray
    rho_minus_0: np.ndarray

    def q(self, side: BoundSide, a: int):
        return getattr(self, f"q_{'plus' if side is UPPER else 'minus'}_{a}")

    def rho(self, side: BoundSide, a: int):
        return getattr(self, f"rho_{'plus' if side is UPPER else 'minus'}_{a}")

    def mu(self, a: int):
        return self.mu1 if a == 1 else self.mu0

    def take(self, idx) -> "NuisanceEval":
        return NuisanceEval(**{k: np.asarray(v)[idx] for k, v in self.__dict__.items()})


@dataclass(frozen=True)
class PseudoOutcomes:
    phi_tau_upper: np.ndarray
    phi_tau_lower: np.ndarray
    phi_1_upper: np.ndarray
    phi_1_lower: np.ndarray
    phi_0_upper: np.ndarray
    phi_0_lower: np.ndarray


def _phi_arm1(nu: NuisanceEval, a, y, side: BoundSide, s: SensitivityParams):
    e = nu.e
    rho = nu.rho(side, 1)
    r = r_value(y, nu.q(side, 1), side, s)
    return a * y + (1.0 - a) * rho + (1.0 - e) * a / e * (r - rho)


def _phi_arm0(nu: NuisanceEval, a, y, side: BoundSide, s: SensitivityParams):
    e = nu.e
    rho = nu.rho(side, 0)
    r = r_value(y, nu.q(side, 0), side, s)
    return (1.0 - a) * y + a * rho + e * (1.0 - a) / (1.0 - e) * (r - rho)


def phi_sample(nu: NuisanceEval, a, y, s: SensitivityParams) -> PseudoOutcomes:
    """All six bound pseudo-outcomes for samples ``(a, y)`` at nuisances ``nu``.

    The upper CATE pseudo-outcome pairs the upper bound of arm 1 with the
    lower bound of arm 0; the lower CATE pseudo-outcome swaps the sides.
    """
    e = np.asarray(nu.e, dtype=float)
    if np.any(~(e > 0.0) | ~(e < 1.0)):
        raise PropensityContractError("propensity must lie strictly inside (0, 1)")
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    p1u = _phi_arm1(nu, a, y, UPPER, s)
    p1l = _phi_arm1(nu, a, y, LOWER, s)
    p0u = _phi_arm0(nu, a, y, UPPER, s)
    p0l = _phi_arm0(nu, a, y, LOWER, s)
    return PseudoOutcomes(
        phi_tau_upper=p1u - p0l,
        phi_tau_lower=p1l - p0u,
        phi_1_upper=p1u,
        phi_1_lower=p1l,
        phi_0_upper=p0u,
        phi_0_lower=p0l,
    )


def dr_pseudo(e, mu1, mu0, a, y):
    """Doubly-robust CATE pseudo-outcome under unconfoundedness."""
    e = np.asarray(e, dtype=float)
    a = np.asarray(a, dtype=float)
    mu_a = np.where(a == 1.0, mu1, mu0)
    return mu1 - mu0 + (a - e) / (e * (1.0 - e)) * (np.asarray(y, dtype=float) - mu_a)
