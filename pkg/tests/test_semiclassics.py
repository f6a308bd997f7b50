import math

import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from cotrace.core import lorentzian_delta, make_system, query
from cotrace.orbits import compound_orbits
from cotrace.semiclassics import (SCTerm, background_box, classical_background, family_label,
                                  jacobian_signature, orbit_sigma, prefactor, sc_density, sc_term,
                                  sigma_calibration)

from conftest import lens


def test_prefactor_conventions():
    assert prefactor(0.05, 1) == pytest.approx(1 / (math.pi * 0.05))
    assert prefactor(0.05, 2, "doubled") == pytest.approx(4 / (math.pi * 0.05))
    with pytest.raises(ValueError):
        prefactor(0.05, 1, "other")


def test_lens_term(ho, ho_lens_catalogue):
    o = lens(ho_lens_catalogue)
    assert jacobian_signature(o) == 0
    assert orbit_sigma(o) == pytest.approx(-math.pi / 2)
    t = sc_term(o, ho.hbar)
    amp = 1 / (math.pi * ho.hbar) * math.sqrt(4.0) / math.sqrt(3.0)
    assert t.amplitude == pytest.approx(amp, rel=1e-8)
    assert t.phase == pytest.approx(o.action_energy / ho.hbar)
    assert t.damping == pytest.approx(math.exp(-0.05 * 4 * math.pi / 3 / ho.hbar))
    assert t.value == pytest.approx(amp * t.damping * math.cos(t.phase - math.pi / 2), rel=1e-10)
    assert family_label(o) == (1, 1, 0, 0)


def test_sum_uses_one_member_per_pair(ho, ho_lens_catalogue):
    r = sc_density(query(0.5, 0.5, 1.0, 0.05), ho_lens_catalogue, ho, background=0.0)
    kept = [o for o in ho_lens_catalogue if o.is_representative and not o.near_caustic]
    assert len(r.terms) == len(kept) > 0
    assert r.value == pytest.approx(math.fsum(t.value for t in r.terms))
    assert r.extra["n_orbits"] == len(ho_lens_catalogue)
    # the degenerate repeated-circle orbits are excluded with a warning
    assert any("near-caustic" in d for d in r.diagnostics)


def test_empty_catalogue_is_background_only(ho):
    q = query(0.5, 0.5, 3.0, 0.05)
    r = sc_density(q, [], ho, background=1.25)
    assert r.value == 1.25 and r.terms == []
    assert any("no classical transition" in d for d in r.diagnostics)


def test_tangent_orbits_excluded(ho):
    q = query(0.5, 0.5, 2.0, 0.05)
    r = sc_density(q, compound_orbits(q, ho), ho, background=0.0)
    assert r.terms == [] and r.value == 0.0


def _ho_background_oracle(E, Ep, tau, eps, hbar):
    """Phase-space integral for unit circles' energies, reduced to a smooth double integral."""
    if tau == 0.0:
        f = lambda x: lorentzian_delta(E - x, eps) * lorentzian_delta(Ep - x, eps)
        val = 2 * math.pi * sum(quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)[0]
                                for a, b in ((0, E), (E, Ep), (Ep, np.inf)) if b > a)
    else:
        def inner(phi, E1):
            E2 = E1 + tau ** 2 / 2 - tau * math.sqrt(2 * E1) * math.sin(phi)
            return 2 * lorentzian_delta(E - E1, eps) * lorentzian_delta(Ep - E2, eps)
        val = sum(dblquad(inner, a, b, -math.pi / 2, math.pi / 2, epsabs=1e-12, epsrel=1e-10)[0]
                  for a, b in ((0.0, E), (E, E + 1.0), (E + 1.0, 60.0)))
    return val / (2 * math.pi * hbar)


@pytest.mark.parametrize("E,Ep,tau", [(0.5, 0.5, 0.0), (0.5, 0.7, 0.0), (0.5, 0.5, 1.0), (0.6, 0.4, 0.7)])
def test_background_matches_oscillator_oracle(ho, E, Ep, tau):
    q = query(E, Ep, tau, 0.05)
    got = classical_background(q, ho)
    ref = _ho_background_oracle(E, Ep, tau, 0.05, ho.hbar)
    assert got == pytest.approx(ref, rel=5e-4)


def test_background_scales_inversely_with_hbar(ho):
    q = query(0.5, 0.5, 1.0, 0.05)
    a = classical_background(q, ho)
    b = classical_background(q, ho.with_hbar(0.025))
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_background_box_contains_both_shells(ho):
    box = background_box(query(0.5, 0.5, 1.0, 0.05), ho)
    assert box[0, 0] < -1 and box[1, 0] > 2 and box[0, 1] < -1 and box[1, 1] > 1


def _synthetic(offset):
    rng = np.random.default_rng(3)
    sets, y = [], []
    for x in np.linspace(0, 6, 80):
        a = SCTerm(0, ("a",), 0.0, 1.0, 7 * x, 0.0, 1.0, 0.0)
        b = SCTerm(1, ("b",), 0.0, 0.3, 11 * x + 0.4, 0.0, 1.0, 0.0)
        sets.append([a, b])
        y.append(math.cos(7 * x + offset) + 0.3 * math.cos(11 * x + 0.4) + 1e-3 * rng.normal())
    y = np.array(y)
    return sets, y - y.mean()


def test_calibration_recovers_injected_offset():
    sets, y = _synthetic(math.pi / 2)
    rep = sigma_calibration(sets, y)
    assert rep.conclusive
    assert rep.offsets[("a",)] == pytest.approx(math.pi / 2)
    assert rep.offsets[("b",)] == 0.0
    assert rep.residual < 0.05 < rep.baseline_residual


def test_calibration_without_offset_keeps_zero():
    sets, y = _synthetic(0.0)
    rep = sigma_calibration(sets, y)
    assert rep.offsets == {("a",): 0.0, ("b",): 0.0}


def test_calibration_flat_signal_is_inconclusive():
    sets, _ = _synthetic(0.0)
    rep = sigma_calibration(sets, np.zeros(len(sets)))
    assert not rep.conclusive and "inconclusive" in rep.note


def test_calibration_leaves_negligible_family_at_zero():
    sets, y = _synthetic(0.0)
    # a third family far below the noise cannot be identified
    sets = [s + [SCTerm(2, ("c",), 0.0, 1e-9, 5 * k, 0.0, 1.0, 0.0)] for k, s in enumerate(sets)]
    rep = sigma_calibration(sets, y)
    assert rep.offsets[("c",)] == 0.0
