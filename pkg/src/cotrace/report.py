"""Oscillation analysis and comparison of density series along 1-D slices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def moving_average(x, y, width) -> np.ndarray:
    """Boxcar average of ``y`` over a window ``width`` (scalar or per point) in ``x``.

    Near the ends the window is truncated to the sampled range.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.broadcast_to(np.asarray(width, dtype=float), x.shape)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))])
    lo = np.maximum(x[0], x - 0.5 * w)
    hi = np.minimum(x[-1], x + 0.5 * w)
    span = hi - lo
    avg = (np.interp(hi, x, cum) - np.interp(lo, x, cum)) / np.where(span > 0, span, 1.0)
    return np.where(span > 0, avg, y)


def smooth_part(x, y, period, order: int = 2) -> np.ndarray:
    """Running mean of ``y`` over one local period.

    A boxcar over a full period removes a sinusoid exactly but biases a smooth
    trend by ``f'' P^2 / 24``. With ``order=2`` the bias is cancelled by
    twicing, ``2 M(y) - M(M(y))``, which keeps the exact removal of the
    oscillation.
    """
    m = moving_average(x, y, period)
    if order == 1:
        return m
    if order == 2:
        return 2.0 * m - moving_average(x, m, period)
    raise ValueError("order must be 1 or 2")


def oscillatory_part(x, y, period, order: int = 2) -> np.ndarray:
    """``y`` minus its smooth part over one local period (see :func:`smooth_part`)."""
    return np.asarray(y, dtype=float) - smooth_part(x, y, period, order)


def interior_mask(x, period, n_periods: float = 0.5) -> np.ndarray:
    """Points at least ``n_periods`` local periods away from both ends of the slice."""
    x = np.asarray(x, dtype=float)
    p = np.broadcast_to(np.asarray(period, dtype=float), x.shape)
    return (x - x[0] >= n_periods * p) & (x[-1] - x >= n_periods * p)


@dataclass(frozen=True)
class Extremum:
    x: float
    y: float
    kind: str            # "max" or "min"
    index: int           # sample index of the bracketing grid point


def parabolic_extrema(x, y) -> list[Extremum]:
    """Interior local extrema refined by the parabola through three neighbours."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = []
    for i in range(1, len(x) - 1):
        a, b, c = y[i - 1], y[i], y[i + 1]
        if not ((b > a and b >= c) or (b < a and b <= c)):
            continue
        x0, x1, x2 = x[i - 1], x[i], x[i + 1]
        den = (x0 - x1) * (x0 - x2) * (x1 - x2)
        A = (x2 * (b - a) + x1 * (a - c) + x0 * (c - b)) / den
        B = (x2 ** 2 * (a - b) + x1 ** 2 * (c - a) + x0 ** 2 * (b - c)) / den
        C = b - A * x1 ** 2 - B * x1
        xm = x1 if A == 0.0 else -B / (2 * A)
        xm = min(max(xm, x0), x2)
        out.append(Extremum(float(xm), float(A * xm * xm + B * xm + C), "max" if b > a else "min", i))
    return out


def local_period_from_extrema(ext: list[Extremum], x: float) -> float:
    """Twice the spacing of the extrema adjacent to ``x`` (NaN with fewer than two)."""
    xs = np.array([e.x for e in ext])
    if len(xs) < 2:
        return math.nan
    k = int(np.clip(np.searchsorted(xs, x), 1, len(xs) - 1))
    return 2.0 * float(xs[k] - xs[k - 1])


@dataclass
class ExtremumMatch:
    reference: Extremum
    candidate: Extremum | None
    period: float
    offset: float            # (candidate - reference) / period

    @property
    def matched(self) -> bool:
        return self.candidate is not None


def match_extrema(ref: list[Extremum], cand: list[Extremum], period=None) -> list[ExtremumMatch]:
    """Pair each reference extremum with the nearest candidate extremum of the same kind.

    ``period`` is a callable ``x -> local period``; by default it is estimated
    from the spacing of the reference extrema.
    """
    out = []
    for e in ref:
        P = period(e.x) if period is not None else local_period_from_extrema(ref, e.x)
        same = [c for c in cand if c.kind == e.kind]
        if not same:
            out.append(ExtremumMatch(e, None, P, math.nan))
            continue
        c = min(same, key=lambda c: abs(c.x - e.x))
        out.append(ExtremumMatch(e, c, P, (c.x - e.x) / P if P and math.isfinite(P) else math.nan))
    return out


@dataclass
class SliceComparison:
    axis: str
    fixed: dict
    x: np.ndarray
    reference: np.ndarray
    candidate: np.ndarray
    matches: list[ExtremumMatch] = field(default_factory=list)

    @property
    def abs_dev(self) -> np.ndarray:
        return np.abs(self.candidate - self.reference)

    @property
    def rel_dev(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.abs_dev / np.abs(self.reference)


def compare_slice(axis: str, fixed: dict, x, reference, candidate, detrend_width=None) -> SliceComparison:
    """Deviations and extremum matching of two series along one slice.

    With ``detrend_width`` both series are reduced to their oscillatory parts
    before extrema are located.
    """
    x = np.asarray(x, dtype=float)
    r = np.asarray(reference, dtype=float)
    c = np.asarray(candidate, dtype=float)
    rr, cc = r, c
    if detrend_width is not None:
        rr = oscillatory_part(x, r, detrend_width)
        cc = oscillatory_part(x, c, detrend_width)
    m = match_extrema(parabolic_extrema(x, rr), parabolic_extrema(x, cc))
    return SliceComparison(axis, fixed, x, r, c, m)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_series(x, series: dict, path, axis: str, fixed: dict) -> None:
    """Write a PNG with several named series sampled on the same slice."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    styles = ("-", "--", "-.", ":")
    for k, (name, y) in enumerate(series.items()):
        ax.plot(x, y, styles[k % len(styles)], lw=1.2, label=name)
    ax.set_xlabel(axis)
    ax.set_ylabel("P")
    ax.set_title(", ".join(f"{k}={v:g}" for k, v in fixed.items()), fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_slice(sc: SliceComparison, path, ref_label: str = "reference",
                 cand_label: str = "candidate") -> None:
    """Write a PNG with both series and the matched extrema of one slice."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    ax.plot(sc.x, sc.reference, "-", lw=1.2, label=ref_label)
    ax.plot(sc.x, sc.candidate, "--", lw=1.2, label=cand_label)
    for m in sc.matches:
        ax.axvline(m.reference.x, color="0.85", lw=0.6, zorder=0)
    ax.set_xlabel(sc.axis)
    ax.set_ylabel("P")
    ax.set_title(", ".join(f"{k}={v:g}" for k, v in sc.fixed.items()), fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
