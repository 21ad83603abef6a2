"""Synthetic data with known sharp bounds.

The benchmark design draws ``X ~ Unif([-2, 2]^5)``, treats with probability
``sigmoid(0.75 x0 + 0.5)`` and draws unit-variance Gaussian outcomes with
mean ``(2a - 1)(x0 + 1) - 2 sin((4a - 2) x0)``.  Because every conditional
outcome law is Gaussian, quantiles, CVaR and the sharp bounds have closed
forms, which this module exposes as oracle nuisances.

``sample_confounded`` adds a binary hidden confounder whose effect on the
treatment odds sits exactly on the sensitivity-model boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .domain import LOWER, UPPER, BoundSide, Dataset, SensitivityParams
from .pseudo import NuisanceEval, rho_compose

N_FEATURES = 5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Acklam's rational approximation to the normal quantile (relative error ~1e-9).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def normal_cdf(z):
    z = np.asarray(z, dtype=float)
    return 0.5 * special.erfc(-z / _SQRT2)


def _horner(coefs, t):
    acc = np.zeros_like(t) + coefs[0]
    for c in coefs[1:]:
        acc = acc * t + c
    return acc


def normal_inv_cdf(p):
    """Standard normal quantile: rational approximation plus one Newton step."""
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0.0) | ~(p < 1.0)):
        raise ValueError("normal_inv_cdf requires 0 < p < 1")
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        x[mid] = _horner(_A, r) * q / (_horner(_B, r) * r + 1.0)
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        x[lo] = _horner(_C, q) / (_horner(_D, q) * q + 1.0)
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log1p(-p[hi]))
        x[hi] = -_horner(_C, q) / (_horner(_D, q) * q + 1.0)
    x = x - (normal_cdf(x) - p) / normal_pdf(x)
    return x if x.ndim else float(x)


def sigmoid(t):
    return special.expit(t)


def nominal_propensity(X):
    X = np.atleast_2d(X)
    return sigmoid(0.75 * X[:, 0] + 0.5)


def mean_outcome(X, a):
    """Conditional mean ``m(x, a)`` of the benchmark outcome."""
    X = np.atleast_2d(X)
    x0 = X[:, 0]
    a = np.asarray(a, dtype=float)
    return (2.0 * a - 1.0) * (x0 + 1.0) - 2.0 * np.sin((4.0 * a - 2.0) * x0)


def true_cate(X):
    return mean_outcome(X, 1) - mean_outcome(X, 0)


def _streams(seed: int, k: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def sample_covariates(n: int, seed: int) -> np.ndarray:
    """Uniform covariates drawn from the covariate stream of ``seed``."""
    return _streams(seed, 3)[0].uniform(-2.0, 2.0, size=(n, N_FEATURES))


def sample_synthetic(n: int, seed: int) -> Dataset:
    """Draw ``n`` benchmark samples; potential outcomes are kept.

    Covariates, treatment and noise use separate streams, so for a fixed seed
    the first ``k`` rows do not depend on ``n``.
    """
    rx, ra, ry = _streams(seed, 3)
    X = rx.uniform(-2.0, 2.0, size=(n, N_FEATURES))
    A = (ra.random(n) < nominal_propensity(X)).astype(np.int64)
    noise = ry.standard_normal((n, 2))
    Y0 = mean_outcome(X, 0) + noise[:, 0]
    Y1 = mean_outcome(X, 1) + noise[:, 1]
    Y = np.where(A == 1, Y1, Y0)
    return Dataset(X, A, Y, Y0=Y0, Y1=Y1)


# --- closed-form oracle -------------------------------------------------------

def gaussian_partial_expectation(t, side: BoundSide):
    """``E[{Z - t}_+]`` (upper) or ``E[{Z - t}_-]`` (lower) for ``Z ~ N(0, 1)``."""
    t = np.asarray(t, dtype=float)
    if side is UPPER:
        return normal_pdf(t) - t * (1.0 - normal_cdf(t))
    return -(t * normal_cdf(t) + normal_pdf(t))


def oracle_quantile(X, a, s: SensitivityParams, side: BoundSide):
    z = normal_inv_cdf(s.alpha)
    sign = 1.0 if side is UPPER else -1.0
    return mean_outcome(X, a) + sign * z


def oracle_cvar(X, a, s: SensitivityParams, side: BoundSide):
    z = normal_inv_cdf(s.alpha)
    sign = 1.0 if side is UPPER else -1.0
    return mean_outcome(X, a) + sign * float(normal_pdf(z)) * s.tail_factor


def rho_at(X, a, side: BoundSide, qbar, s: SensitivityParams):
    """``E[R(Z, qbar) | X=x, A=a]`` at an arbitrary putative quantile ``qbar``."""
    m = mean_outcome(X, a)
    hbar = qbar + s.tail_factor * gaussian_partial_expectation(qbar - m, side)
    return s.inv_lambda * m + (1.0 - s.inv_lambda) * hbar


def oracle_nuisance(X, a, s: SensitivityParams) -> dict:
    """All true nuisances for arm ``a`` at the rows of ``X``."""
    mu = mean_outcome(X, a)
    cvar_plus = oracle_cvar(X, a, s, UPPER)
    cvar_minus = oracle_cvar(X, a, s, LOWER)
    return {
        "e": nominal_propensity(X),
        "mu": mu,
        "q_plus": oracle_quantile(X, a, s, UPPER),
        "q_minus": oracle_quantile(X, a, s, LOWER),
        "cvar_plus": cvar_plus,
        "cvar_minus": cvar_minus,
        "rho_plus": rho_compose(mu, cvar_plus, s),
        "rho_minus": rho_compose(mu, cvar_minus, s),
    }


def oracle_eval(X, s: SensitivityParams) -> NuisanceEval:
    """Oracle nuisances packed for the pseudo-outcome formulas."""
    n1 = oracle_nuisance(X, 1, s)
    n0 = oracle_nuisance(X, 0, s)
    return NuisanceEval(
        e=n1["e"], mu1=n1["mu"], mu0=n0["mu"],
        q_plus_1=n1["q_plus"], q_minus_1=n1["q_minus"],
        q_plus_0=n0["q_plus"], q_minus_0=n0["q_minus"],
        rho_plus_1=n1["rho_plus"], rho_minus_1=n1["rho_minus"],
        rho_plus_0=n0["rho_plus"], rho_minus_0=n0["rho_minus"],
    )


def true_bound(X, s: SensitivityParams, side: BoundSide):
    """Sharp CATE bound of the benchmark design at the rows of ``X``."""
    e = nominal_propensity(X)
    n1 = oracle_nuisance(X, 1, s)
    n0 = oracle_nuisance(X, 0, s)
    if side is UPPER:
        y1 = e * n1["mu"] + (1.0 - e) * n1["rho_plus"]
        y0 = (1.0 - e) * n0["mu"] + e * n0["rho_minus"]
    else:
        y1 = e * n1["mu"] + (1.0 - e) * n1["rho_minus"]
        y0 = (1.0 - e) * n0["mu"] + e * n0["rho_plus"]
    return y1 - y0


# --- hidden confounding -------------------------------------------------------

@dataclass(frozen=True)
class ConfoundedConfig:
    """Binary-confounder variant of the benchmark.

    ``lambda_star`` is the true odds-ratio level, ``confounder_effect`` the
    outcome shift ``confounder_effect * (2U - 1)`` shared by both arms.  The
    treated mean is ``m0 + cate_scale * (m1 - m0) + cate_shift``, so the
    effect is the benchmark effect scaled and shifted.
    """

    lambda_star: float = math.e
    confounder_effect: float = 1.0
    cate_shift: float = 0.0
    cate_scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_star) and self.lambda_star >= 1.0):
            raise ValueError(f"lambda_star must be >= 1, got {self.lambda_star}")


def full_propensity(X, u, lambda_star: float):
    """``P(A=1 | X, U)``: nominal odds scaled by ``lambda_star ** (2u - 1)``."""
    e = nominal_propensity(X)
    odds = e / (1.0 - e) * np.power(lambda_star, 2.0 * np.asarray(u, dtype=float) - 1.0)
    return odds / (1.0 + odds)


def confounder_probability(X, lambda_star: float):
    """``P(U=1 | X)`` chosen so that ``P(A=1 | X)`` equals the nominal propensity."""
    e = nominal_propensity(X)
    if lambda_star == 1.0:
        return np.full_like(e, 0.5)
    e1 = full_propensity(X, 1.0, lambda_star)
    e0 = full_propensity(X, 0.0, lambda_star)
    return (e - e0) / (e1 - e0)


def confounded_cate(X, cfg: ConfoundedConfig):
    return cfg.cate_scale * true_cate(X) + cfg.cate_shift


def sample_confounded(n: int, seed: int, cfg: ConfoundedConfig = ConfoundedConfig()) -> Dataset:
    """Draw ``n`` samples with a hidden binary confounder ``U``.

    Treatment odds given ``(X, U)`` equal the observed odds given ``X`` times
    ``lambda_star ** (2U - 1)``, so the sensitivity model holds at
    ``lambda_star`` with both extremes attained.
    """
    rx, ru, ra, ry = _streams(seed, 4)
    X = rx.uniform(-2.0, 2.0, size=(n, N_FEATURES))
    U = (ru.random(n) < confounder_probability(X, cfg.lambda_star)).astype(float)
    A = (ra.random(n) < full_propensity(X, U, cfg.lambda_star)).astype(np.int64)
    noise = ry.standard_normal((n, 2))
    shift = cfg.confounder_effect * (2.0 * U - 1.0)
    m0 = mean_outcome(X, 0)
    Y0 = m0 + shift + noise[:, 0]
    Y1 = m0 + cfg.cate_scale * (mean_outcome(X, 1) - m0) + cfg.cate_shift + shift + noise[:, 1]
    Y = np.where(A == 1, Y1, Y0)
    return Dataset(X, A, Y, Y0=Y0, Y1=Y1, U=U)
