import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from cotrace.core import (DomainError, PhasePoint, Polynomial, SmoothingWindow, harmonic,
                          lorentzian_delta, make_system, query, quartic, validate_system)

finite = st.floats(-1e3, 1e3, allow_nan=False)
widths = st.floats(1e-3, 10.0)


@given(finite, widths)
def test_lorentzian_is_even(E, eps):
    assert lorentzian_delta(E, eps) == lorentzian_delta(-E, eps)


@given(st.floats(0, 1e3), st.floats(0, 1e3), widths)
def test_lorentzian_decreases_away_from_zero(a, b, eps):
    lo, hi = sorted((a, b))
    assert lorentzian_delta(hi, eps) <= lorentzian_delta(lo, eps)


@pytest.mark.parametrize("eps", [1e-3, 0.05, 0.7])
@pytest.mark.parametrize("a", [0.1, 1.0, 25.0])
def test_lorentzian_mass_matches_arctan(eps, a):
    # int_{-a}^{a} = (2 / pi) arctan(a / eps)
    got, _ = quad(lorentzian_delta, 0.0, a, args=(eps,), epsabs=1e-15, epsrel=1e-13, limit=200)
    got *= 2
    assert got == pytest.approx(2 / math.pi * math.atan(a / eps), abs=1e-12)


def test_lorentzian_total_mass():
    eps = 0.05
    left, _ = quad(lorentzian_delta, -np.inf, 0.0, args=(eps,), epsabs=1e-13)
    right, _ = quad(lorentzian_delta, 0.0, np.inf, args=(eps,), epsabs=1e-13)
    assert left + right == pytest.approx(1.0, abs=1e-10)


def test_lorentzian_accepts_window_and_arrays():
    w = SmoothingWindow(0.2)
    E = np.linspace(-1, 1, 5)
    assert np.allclose(lorentzian_delta(E, w), 0.2 / (np.pi * (0.04 + E ** 2)))


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_window_rejects_nonpositive(bad):
    with pytest.raises(DomainError):
        SmoothingWindow(bad)
    with pytest.raises(DomainError):
        lorentzian_delta(0.0, bad)


def test_lorentzian_rejects_nonfinite_energy():
    with pytest.raises(DomainError):
        lorentzian_delta(np.inf, 0.1)


def test_query_validation_and_swap():
    q = query(0.5, 0.7, 1.2, 0.05)
    s = q.swapped()
    assert (s.E, s.E_prime, s.tau, s.epsilon) == (0.7, 0.5, -1.2, 0.05)
    with pytest.raises(DomainError):
        query(float("nan"), 0.5, 1.0, 0.05)


def test_phase_point_roundtrip():
    p = PhasePoint.from_array([1.0, -2.0, 3.0, 4.0])
    assert p.q == (1.0, -2.0) and p.p == (3.0, 4.0) and p.dof == 2
    assert np.array_equal(p.to_array(), [1.0, -2.0, 3.0, 4.0])
    with pytest.raises(DomainError):
        PhasePoint((math.inf,), (0.0,))
    with pytest.raises(ValueError):
        PhasePoint((0.0,), (0.0, 1.0))


def test_polynomial_matches_closed_forms():
    H = quartic()                    # p^2/2 + q^4/4
    X = np.array([[0.3, -1.2], [1.5, 0.4], [-2.0, 0.0]])
    q, p = X[:, 0], X[:, 1]
    assert np.allclose(H.value(X), p ** 2 / 2 + q ** 4 / 4, rtol=1e-14)
    assert np.allclose(H.gradient(X), np.stack([q ** 3, p], axis=1), rtol=1e-14)
    hs = H.hessian(X)
    assert np.allclose(hs[:, 0, 0], 3 * q ** 2) and np.allclose(hs[:, 1, 1], 1.0)
    assert np.allclose(hs[:, 0, 1], 0.0) and np.allclose(hs[:, 1, 0], 0.0)


def test_polynomial_two_dof_against_differences():
    # q1^2 q2 p2 + 3 p1^3 - q2^4
    P = Polynomial.from_dict({(2, 1, 0, 1): 1.0, (0, 0, 3, 0): 3.0, (0, 4, 0, 0): -1.0}, dof=2)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(7, 4))
    q1, q2, p1, p2 = X.T
    assert np.allclose(P.value(X), q1 ** 2 * q2 * p2 + 3 * p1 ** 3 - q2 ** 4)
    h = 1e-6
    fd = np.stack([(P.value(X + h * e) - P.value(X - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.allclose(P.gradient(X), fd, atol=1e-7)
    fdh = np.stack([(P.gradient(X + h * e) - P.gradient(X - h * e)) / (2 * h) for e in np.eye(4)], axis=2)
    assert np.allclose(P.hessian(X), fdh, atol=1e-6)


def test_polynomial_large_batch_agrees_with_small():
    P = quartic(a=1.0, b=0.3)
    X = np.random.default_rng(2).normal(size=(6000, 2))
    big = P.value(X)
    small = np.concatenate([P.value(X[i:i + 1000]) for i in range(0, 6000, 1000)])
    assert np.allclose(big, small, rtol=1e-14)
    assert np.allclose(P.gradient(X)[:5], P.gradient(X[:5]), rtol=1e-14)


def test_polynomial_rejects_bad_exponents():
    with pytest.raises(ValueError):
        Polynomial(((1.0, (1, 0, 0)),), dof=1)
    with pytest.raises(ValueError):
        Polynomial(((1.0, (-1, 0)),), dof=1)


def test_separable_parts():
    H = harmonic(omega=2.0)
    assert H.is_separable()
    assert H.momentum_part().value(np.array([[5.0, 1.0]])) == pytest.approx(0.5)
    assert H.position_part().value(np.array([[1.0, 5.0]])) == pytest.approx(2.0)


@pytest.mark.parametrize("name", ["harmonic", "quartic", "double_well", "displaced_quartic",
                                  "harmonic_product", "coupled_quartic"])
def test_named_systems_validate(name):
    rep = validate_system(make_system(name, hbar=0.1))
    assert rep.ok, rep.failures


def test_validation_flags_nonpositive_hbar():
    rep = validate_system(make_system("harmonic", hbar=-1.0))
    assert not rep.ok and any("hbar" in f for f in rep.failures)


def test_unknown_system_or_driver():
    with pytest.raises(ValueError):
        make_system("nope", hbar=1.0)
    with pytest.raises(ValueError):
        make_system("harmonic", hbar=1.0, driver="sideways")


def test_drivers():
    x = np.array([[0.3, 0.7]])
    assert make_system("harmonic", 1.0, "momentum", 2.0).driver.value(x)[0] == pytest.approx(1.4)
    assert make_system("harmonic", 1.0, "position", 2.0).driver.value(x)[0] == pytest.approx(0.6)
    s = make_system("quartic", 1.0, "self", 0.5)
    assert s.driver.value(x)[0] == pytest.approx(0.5 * s.hamiltonian.value(x)[0])
