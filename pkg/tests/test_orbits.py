import math

import numpy as np
import pytest

from cotrace.core import make_system, query
from cotrace.orbits import (SectionPlane, caustic_counter, compound_orbits, jacobian_times_energies,
                            orbit_at, product_section_fixed_point, rebased_det, segment_times,
                            shell_intersections, symplectic_area, time_reversal_partner)

from conftest import lens

Q = query(0.5, 0.5, 1.0, 0.05)


def test_circle_intersections(ho):
    xs = shell_intersections(Q, ho)
    pts = sorted((tuple(x.point) for x in xs), key=lambda p: p[1])
    assert len(pts) == 2
    assert np.allclose(pts, [(0.5, -math.sqrt(0.75)), (0.5, math.sqrt(0.75))], atol=1e-9)
    assert not any(x.tangency_flag for x in xs)


def test_disjoint_shells_give_no_orbits(ho):
    assert shell_intersections(query(0.5, 0.5, 3.0, 0.05), ho) == []
    assert compound_orbits(query(0.5, 0.5, 3.0, 0.05), ho) == []


def test_touching_shells_are_flagged(ho):
    # unit circles centred 2 apart touch at (1, 0)
    orbs = compound_orbits(query(0.5, 0.5, 2.0, 0.05), ho)
    assert orbs and all(o.near_caustic for o in orbs)
    assert any(np.allclose(o.endpoints[0].point, [1.0, 0.0], atol=1e-4) for o in orbs)


def test_arc_times_on_circles(ho):
    cat = segment_times(shell_intersections(Q, ho), Q, ho, j_max=0)
    assert cat.period_E == pytest.approx(2 * math.pi, rel=1e-11)
    assert sorted(cat.arc_E.values()) == pytest.approx([2 * math.pi / 3, 4 * math.pi / 3], rel=1e-10)
    assert sorted(cat.arc_D.values()) == pytest.approx([2 * math.pi / 3, 4 * math.pi / 3], rel=1e-10)


def test_lens_action(ho_lens_catalogue):
    o = lens(ho_lens_catalogue)
    assert o.t == pytest.approx(2 * math.pi / 3, abs=1e-10)
    assert o.t_prime == pytest.approx(2 * math.pi / 3, abs=1e-10)
    assert o.action_energy == pytest.approx(2 * math.pi / 3 - math.sqrt(3) / 2, abs=1e-10)
    assert o.action_time == pytest.approx(o.action_energy - 0.5 * (o.t + o.t_prime), abs=1e-12)


def test_det_matches_rotation_angle(ho_lens_catalogue):
    checked = 0
    for o in ho_lens_catalogue:
        assert o.det_one_minus_M == pytest.approx(2 - 2 * math.cos(o.t + o.t_prime), abs=1e-8)
        checked += 1
    assert checked == len(ho_lens_catalogue) > 8


def test_monodromy_is_symplectic(ho_lens_catalogue):
    assert max(o.monodromy.symplectic_defect() for o in ho_lens_catalogue) < 1e-8


def test_start_point_invariance(ho, ho_lens_catalogue):
    for o in ho_lens_catalogue:
        assert rebased_det(o, ho) == pytest.approx(o.det_one_minus_M, abs=1e-8)


def test_time_reversal_pairs(ho_lens_catalogue):
    for o in ho_lens_catalogue:
        partner = time_reversal_partner(o, ho_lens_catalogue)
        assert partner is not None and partner is not o
        assert partner.det_one_minus_M == pytest.approx(o.det_one_minus_M, abs=1e-8)
    reps = [o for o in ho_lens_catalogue if o.is_representative]
    assert 2 * len(reps) == len(ho_lens_catalogue)


def test_winding_range(ho):
    # windings -1 and 0 on each segment, for both ordered pairs of intersections
    assert len(compound_orbits(Q, ho, j_max=0)) == 8


def test_jacobian_and_inverse(ho, ho_lens_catalogue):
    o = lens(ho_lens_catalogue)
    r = jacobian_times_energies(o, Q, ho, inverse=True)
    assert np.allclose(r.matrix, o.jacobian_tE, atol=1e-6)
    assert r.det * r.inverse_det == pytest.approx(1.0, abs=1e-6)


def test_lens_jacobian_closed_form(ho_lens_catalogue):
    # t = 2 arccos((E - E' + tau^2/2) / (tau sqrt(2E))) at unit frequency
    def times(E, Ep, tau=1.0):
        t = 2 * math.acos((E - Ep + tau ** 2 / 2) / (tau * math.sqrt(2 * E)))
        tp = 2 * math.acos((Ep - E + tau ** 2 / 2) / (tau * math.sqrt(2 * Ep)))
        return np.array([t, tp])
    h = 1e-6
    fd = np.column_stack([(times(0.5 + h, 0.5) - times(0.5 - h, 0.5)) / (2 * h),
                          (times(0.5, 0.5 + h) - times(0.5, 0.5 - h)) / (2 * h)])
    assert np.allclose(lens(ho_lens_catalogue).jacobian_tE, fd, atol=1e-5)


def test_action_derivative_is_time(ho, ho_lens_catalogue):
    o = lens(ho_lens_catalogue)
    h = 1e-4
    dS_dE = (orbit_at(o, ho, 0.5 + h, 0.5).action_energy - orbit_at(o, ho, 0.5 - h, 0.5).action_energy) / (2 * h)
    dS_dEp = (orbit_at(o, ho, 0.5, 0.5 + h).action_energy - orbit_at(o, ho, 0.5, 0.5 - h).action_energy) / (2 * h)
    assert dS_dE == pytest.approx(o.t, rel=1e-4)
    assert dS_dEp == pytest.approx(o.t_prime, rel=1e-4)


def test_lens_crossing_index(ho, ho_lens_catalogue):
    o = lens(ho_lens_catalogue)
    c = caustic_counter(ho, o.endpoints[0].point, o.t, o.t_prime, Q.tau)
    assert c.maslov_index == o.maslov_index == 1
    assert c.count == o.caustic_index


def test_symplectic_area_of_circle():
    # clockwise unit circle in two halves: the integral of p dq is pi
    th = np.linspace(0, math.pi, 2 ** 6 + 1)
    a = np.stack([np.cos(th), -np.sin(th)], axis=1)
    b = np.stack([np.cos(th + math.pi), -np.sin(th + math.pi)], axis=1)
    assert symplectic_area([a, b]) == pytest.approx(math.pi, abs=1e-10)


def test_quartic_lens_times_are_symmetric(quartic):
    orbs = compound_orbits(query(1.0, 1.0, 2.3, 0.05), quartic)
    reps = [o for o in orbs if o.is_representative and o.j == 0 and o.j_prime == 0]
    short = min(reps, key=lambda o: o.t + o.t_prime)
    assert short.t == pytest.approx(short.t_prime, abs=1e-9)
    assert short.t > 0 and abs(short.det_one_minus_M) > 1e-3


def test_product_fixed_point_recovers_embedded_orbit(ho, ho_lens_catalogue):
    spec2 = make_system("harmonic_product", hbar=0.05)
    fp = product_section_fixed_point(Q, spec2, [0.01, -0.02], SectionPlane(0, 0.0, 1))
    assert fp.residual < 1e-6
    assert np.allclose(fp.reduced, 0.0, atol=1e-6)
    match = [o for o in ho_lens_catalogue
             if abs(o.t - fp.t) < 1e-6 and abs(o.t_prime - fp.t_prime) < 1e-6]
    assert len(match) == 1
    assert fp.action == pytest.approx(match[0].action_energy, abs=1e-6)


def test_product_fixed_point_needs_two_dof(ho):
    with pytest.raises(ValueError):
        product_section_fixed_point(Q, ho, [0.0])
