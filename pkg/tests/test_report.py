import math

import numpy as np
import pytest

from cotrace.report import (compare_slice, interior_mask, match_extrema, moving_average,
                            oscillatory_part, parabolic_extrema, render_slice, smooth_part)

P = 0.5


def grid(n=2001):
    return np.linspace(0.0, 5.0, n)


def test_full_period_average_removes_sinusoid():
    x = grid()
    m = interior_mask(x, P)
    assert np.max(np.abs(moving_average(x, np.sin(2 * np.pi * x / P), P)[m])) < 1e-5


def test_twicing_is_exact_for_quadratics():
    x = grid()
    y = 0.3 * x ** 2 - x + 2
    m = interior_mask(x, 2 * P, n_periods=1.0)
    one = smooth_part(x, y, P, order=1)
    two = smooth_part(x, y, P, order=2)
    # a boxcar biases the curvature term by a P^2 / 12
    assert np.allclose(one[m] - y[m], 0.3 * P ** 2 / 12, atol=1e-5)
    assert np.max(np.abs(two[m] - y[m])) < 1e-5


def test_oscillatory_part_keeps_oscillation():
    x = grid()
    osc = 0.1 * np.cos(2 * np.pi * x / P)
    y = osc + 0.3 * x ** 2
    m = interior_mask(x, 2 * P, n_periods=1.0)
    assert np.max(np.abs(oscillatory_part(x, y, P)[m] - osc[m])) < 1e-4


def test_parabolic_extrema_positions():
    x = np.linspace(0.0, 4 * np.pi, 57)
    ext = parabolic_extrema(x, np.cos(x + 0.1))
    kinds = [e.kind for e in ext]
    assert kinds == ["min", "max", "min"]
    truth = [np.pi - 0.1, 2 * np.pi - 0.1, 3 * np.pi - 0.1]
    assert np.allclose([e.x for e in ext], truth, atol=2e-3)


def test_match_extrema_offsets_in_periods():
    x = np.linspace(0.0, 5.0, 4001)
    ref = parabolic_extrema(x, np.cos(2 * np.pi * x / P))
    cand = parabolic_extrema(x, np.cos(2 * np.pi * (x - 0.05) / P))
    ms = match_extrema(ref, cand, period=lambda _: P)
    inner = [m for m in ms if 0.1 < m.reference.x < 4.9]
    assert inner and all(m.matched for m in inner)
    assert np.allclose([m.offset for m in inner], 0.1, atol=1e-4)


def test_match_extrema_default_period():
    x = np.linspace(0.0, 5.0, 4001)
    ref = parabolic_extrema(x, np.cos(2 * np.pi * x / P))
    ms = match_extrema(ref, ref)
    assert all(m.period == pytest.approx(P, rel=1e-3) and m.offset == 0.0 for m in ms)


def test_unmatched_kind_reported():
    ms = match_extrema(parabolic_extrema([0, 1, 2], [0, 1, 0]), [])
    assert len(ms) == 1 and not ms[0].matched and math.isnan(ms[0].offset)


def test_compare_slice_and_figure(tmp_path):
    x = np.linspace(0, 3, 301)
    a = np.sin(4 * x) + x
    b = np.sin(4 * x + 0.05) + x
    sc = compare_slice("tau", {"E": 1.0}, x, a, b, detrend_width=2 * np.pi / 4)
    assert np.max(sc.abs_dev) < 0.06
    assert sc.matches and all(abs(m.offset) < 0.02 for m in sc.matches if m.matched)
    path = tmp_path / "s.png"
    render_slice(sc, path)
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
