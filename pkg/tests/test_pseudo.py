from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cate_bounds.domain import LOWER, UPPER, from_log_lambda, make_sensitivity
from cate_bounds.pseudo import (
    NuisanceEval,
    PropensityContractError,
    dr_pseudo,
    h_value,
    phi_sample,
    r_value,
    rho_compose,
)

E = math.e


# --- independent scalar oracle --------------------------------------------------

def _h(y, q, upper, lam):
    d = y - q
    return q + (lam + 1.0) * (max(d, 0.0) if upper else min(d, 0.0))


def _r(y, q, upper, lam):
    return y / lam + (1.0 - 1.0 / lam) * _h(y, q, upper, lam)


def _phi_oracle(e, a, y, lam, nu):
    """Scalar bound pseudo-outcomes written out term by term."""
    p1u = a * y + (1 - a) * nu["rp1"] + (1 - e) * a / e * (_r(y, nu["qp1"], True, lam) - nu["rp1"])
    p1l = a * y + (1 - a) * nu["rm1"] + (1 - e) * a / e * (_r(y, nu["qm1"], False, lam) - nu["rm1"])
    p0l = (1 - a) * y + a * nu["rm0"] + e * (1 - a) / (1 - e) * (_r(y, nu["qm0"], False, lam) - nu["rm0"])
    p0u = (1 - a) * y + a * nu["rp0"] + e * (1 - a) / (1 - e) * (_r(y, nu["qp0"], True, lam) - nu["rp0"])
    return p1u - p0l, p1l - p0u


def _dr_oracle(e, mu1, mu0, a, y):
    mu_a = mu1 if a == 1 else mu0
    return mu1 - mu0 + (a - e) / (e * (1 - e)) * (y - mu_a)


def _random_config(rng, lam=None):
    lam = float(np.exp(rng.uniform(0, 2))) if lam is None else lam
    nu = {k: rng.normal(scale=2) for k in ("qp1", "qm1", "qp0", "qm0", "rp1", "rm1", "rp0", "rm0")}
    return lam, rng.uniform(0.02, 0.98), int(rng.integers(0, 2)), rng.normal(scale=3), nu


def _pack(e, nu, mu1=0.0, mu0=0.0):
    f = lambda v: np.array([v], dtype=float)  # noqa: E731
    return NuisanceEval(e=f(e), mu1=f(mu1), mu0=f(mu0), q_plus_1=f(nu["qp1"]), q_minus_1=f(nu["qm1"]),
                        q_plus_0=f(nu["qp0"]), q_minus_0=f(nu["qm0"]), rho_plus_1=f(nu["rp1"]),
                        rho_minus_1=f(nu["rm1"]), rho_plus_0=f(nu["rp0"]), rho_minus_0=f(nu["rm0"]))


# --- H, R, rho -------------------------------------------------------------------

def test_h_vanishes_at_quantile():
    for lam in (1.0, 2.0, 10.0):
        s = make_sensitivity(lam)
        for side in (UPPER, LOWER):
            assert h_value(0.7, 0.7, side, s) == pytest.approx(0.7)


def test_h_examples(s_e):
    assert h_value(1.0, 0.0, UPPER, s_e) == pytest.approx(3.718282, abs=1e-6)
    assert h_value(-1.0, 0.0, UPPER, s_e) == 0.0
    assert h_value(-1.0, 0.0, LOWER, s_e) == pytest.approx(-(E + 1))


def test_r_examples(s_e, s_one):
    assert r_value(1.0, 0.0, UPPER, s_e) == pytest.approx(E, abs=1e-6)
    assert r_value(-1.0, 0.0, LOWER, s_e) == pytest.approx(-E, abs=1e-6)
    for y, q in ((1.3, -2.0), (-4.0, 0.5)):
        for side in (UPPER, LOWER):
            assert r_value(y, q, side, s_one) == y


def test_rho_compose_examples(s_e, s_one):
    assert rho_compose(1.0, 99.0, s_one) == 1.0
    assert rho_compose(1.0, 2.2272, s_e) == pytest.approx(1.7758, abs=5e-4)
    for lam in (1.0, 3.0):
        assert rho_compose(-0.4, -0.4, make_sensitivity(lam)) == pytest.approx(-0.4, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(y=st.floats(-50, 50), q=st.floats(-50, 50), log_lam=st.floats(0, 3))
def test_h_ordering(y, q, log_lam):
    s = from_log_lambda(log_lam)
    hu = float(h_value(y, q, UPPER, s))
    hl = float(h_value(y, q, LOWER, s))
    assert hu >= y - 1e-12 and hu >= q - 1e-12
    assert hl <= y + 1e-12 and hl <= q + 1e-12


def test_r_matches_oracle(rng):
    for _ in range(500):
        lam = float(np.exp(rng.uniform(0, 2)))
        s = make_sensitivity(lam)
        y, q = rng.normal(scale=3, size=2)
        for side, up in ((UPPER, True), (LOWER, False)):
            assert r_value(y, q, side, s) == pytest.approx(_r(y, q, up, lam), rel=1e-12, abs=1e-12)


# --- phi -------------------------------------------------------------------------

def test_phi_matches_scalar_oracle(rng):
    for _ in range(1000):
        lam, e, a, y, nu = _random_config(rng)
        po = phi_sample(_pack(e, nu), a, y, make_sensitivity(lam))
        up, lo = _phi_oracle(e, a, y, lam, nu)
        assert po.phi_tau_upper[0] == pytest.approx(up, rel=1e-10, abs=1e-10)
        assert po.phi_tau_lower[0] == pytest.approx(lo, rel=1e-10, abs=1e-10)


def test_phi_hand_example(s_one):
    nu = {"qp1": 1.0, "qm1": 1.0, "qp0": 0.0, "qm0": 0.0, "rp1": 1.0, "rm1": 1.0, "rp0": 0.0, "rm0": 0.0}
    po = phi_sample(_pack(0.5, nu, 1.0, 0.0), 1, 2.0, s_one)
    assert po.phi_tau_upper[0] == pytest.approx(3.0)
    assert po.phi_tau_lower[0] == pytest.approx(3.0)
    assert dr_pseudo(0.5, 1.0, 0.0, 1, 2.0) == pytest.approx(3.0)


def test_phi0_for_treated_is_rho(rng, s_e):
    for _ in range(100):
        _, e, _, y, nu = _random_config(rng)
        po = phi_sample(_pack(e, nu), 1, y, s_e)
        assert po.phi_0_lower[0] == nu["rm0"]
        assert po.phi_0_upper[0] == nu["rp0"]


def test_identities_exact(rng):
    n = 5000
    lam = 2.5
    nu = NuisanceEval(*(rng.normal(size=n) for _ in range(11)))
    nu = NuisanceEval(**{**nu.__dict__, "e": rng.uniform(0.05, 0.95, n)})
    po = phi_sample(nu, rng.integers(0, 2, n), rng.normal(size=n), make_sensitivity(lam))
    assert np.array_equal(po.phi_tau_upper, po.phi_1_upper - po.phi_0_lower)
    assert np.array_equal(po.phi_tau_lower, po.phi_1_lower - po.phi_0_upper)


def test_lambda_one_reduces_to_dr(rng, s_one):
    n = 10_000
    e = rng.uniform(0.01, 0.99, n)
    mu1, mu0 = rng.normal(scale=2, size=(2, n))
    a = rng.integers(0, 2, n)
    y = rng.normal(scale=3, size=n)
    # at unit sensitivity rho equals mu whatever the quantile/CVaR nuisances are
    qs = rng.normal(size=(4, n))
    nu = NuisanceEval(e=e, mu1=mu1, mu0=mu0, q_plus_1=qs[0], q_minus_1=qs[1], q_plus_0=qs[2], q_minus_0=qs[3],
                      rho_plus_1=mu1, rho_minus_1=mu1, rho_plus_0=mu0, rho_minus_0=mu0)
    po = phi_sample(nu, a, y, s_one)
    oracle = np.array([_dr_oracle(*t) for t in zip(e, mu1, mu0, a, y)])
    assert np.max(np.abs(po.phi_tau_upper - oracle)) <= 1e-10
    assert np.array_equal(po.phi_tau_upper, po.phi_tau_lower)


def test_dr_examples():
    assert dr_pseudo(0.5, 1.0, 0.0, 1, 2.0) == pytest.approx(3.0)
    assert dr_pseudo(0.3, 1.5, -0.5, 1, 1.5) == pytest.approx(2.0)
    assert dr_pseudo(0.3, 1.5, -0.5, 0, -0.5) == pytest.approx(2.0)
    assert dr_pseudo(0.5, 0.0, 0.0, 0, 1.0) == pytest.approx(-2.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10), shift=st.floats(-10, 10))
def test_scale_and_shift_equivariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    lam, e, a, y, nu = _random_config(rng)
    s = make_sensitivity(lam)
    base = phi_sample(_pack(e, nu), a, y, s)
    scaled = phi_sample(_pack(e, {k: scale * v for k, v in nu.items()}), a, scale * y, s)
    shifted = phi_sample(_pack(e, {k: v + shift for k, v in nu.items()}), a, y + shift, s)
    tol = 1e-12 * (1 + scale) * (1 + abs(shift)) * 1e3
    for name in base.__dataclass_fields__:
        b = getattr(base, name)[0]
        assert getattr(scaled, name)[0] == pytest.approx(scale * b, abs=tol * (1 + abs(b)))
    for name in ("phi_1_upper", "phi_0_lower", "phi_1_lower", "phi_0_upper"):
        b = getattr(base, name)[0]
        assert getattr(shifted, name)[0] == pytest.approx(b + shift, abs=tol * (1 + abs(b)))
    for name in ("phi_tau_upper", "phi_tau_lower"):
        b = getattr(base, name)[0]
        assert getattr(shifted, name)[0] == pytest.approx(b, abs=tol * (1 + abs(b)))


def test_propensity_contract(s_e):
    nu = {k: 0.0 for k in ("qp1", "qm1", "qp0", "qm0", "rp1", "rm1", "rp0", "rm0")}
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(PropensityContractError):
            phi_sample(_pack(bad, nu), 1, 0.0, s_e)
