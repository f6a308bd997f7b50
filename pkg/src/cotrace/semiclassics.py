"""Semiclassical transition density: compound-orbit sum plus the classical
background of zero-length orbits, and phase-offset calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import SystemSpec, TransitionQuery, lorentzian_delta
from .dynamics import drive_points, hamiltonian_minimum, trace_contour
from .orbits import NEAR_CAUSTIC_DET, CompoundOrbit
from .quantum import DensityResult

PREFACTORS = ("trace", "doubled")


class RefinementError(RuntimeError):
    """Successive quadrature refinements disagree beyond tolerance."""


def _sgn(x: float) -> int:
    return int(x > 0) - int(x < 0)


def family_label(orbit: CompoundOrbit) -> tuple:
    """Continuation-stable label: time signs plus half-period classes of both segments."""
    TE, TD = orbit.periods
    cE = int(2 * abs(orbit.t) / TE) if math.isfinite(TE) else 0
    cD = int(2 * abs(orbit.t_prime) / TD) if math.isfinite(TD) else 0
    return (_sgn(orbit.t), _sgn(orbit.t_prime), cE, cD)


def jacobian_signature(orbit: CompoundOrbit) -> int:
    if orbit.jacobian_tE is None:
        return 0
    Jm = np.asarray(orbit.jacobian_tE, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (Jm + Jm.T))
    tol = 1e-10 * max(1.0, float(np.max(np.abs(w))))
    return int(np.sum(w > tol) - np.sum(w < -tol))


def orbit_sigma(orbit: CompoundOrbit, offset: float = 0.0) -> float:
    """Phase index of one orbit term.

    The trace contributes ``-pi/2`` per unit of the crossing index of the
    linearized compound path, and the stationary-phase integration over
    ``(t, t')`` contributes ``-pi/4`` times the signature of ``d(t,t')/d(E,E')``.
    """
    return -0.5 * math.pi * orbit.maslov_index - 0.25 * math.pi * jacobian_signature(orbit) + offset


@dataclass
class SCTerm:
    orbit_id: int
    family: tuple
    action: float
    amplitude: float
    phase: float
    maslov_sigma: float
    damping: float
    value: float
    t: float = 0.0
    t_prime: float = 0.0

    def to_record(self) -> dict:
        return {"orbit_id": self.orbit_id, "family": "/".join(str(k) for k in self.family),
                "S": self.action, "sigma": self.maslov_sigma, "amplitude": self.amplitude,
                "damping": self.damping, "value": self.value}


def prefactor(hbar: float, dof: int, kind: str = "trace") -> float:
    """Weight of one time-reversal pair: ``1/(pi hbar)``, or ``2^N/(pi hbar)`` for ``"doubled"``."""
    if kind == "trace":
        return 1.0 / (math.pi * hbar)
    if kind == "doubled":
        return 2.0 ** dof / (math.pi * hbar)
    raise ValueError(f"unknown prefactor convention {kind!r}; expected one of {PREFACTORS}")


def sc_term(orbit: CompoundOrbit, hbar: float, dof: int = 1, offset: float = 0.0,
            kind: str = "trace") -> SCTerm:
    amp = prefactor(hbar, dof, kind) * math.sqrt(abs(orbit.jacobian_det)) \
        / math.sqrt(abs(orbit.det_one_minus_M))
    phase = orbit.action_energy / hbar
    sig = orbit_sigma(orbit, offset)
    damp = orbit.damping(hbar)
    return SCTerm(orbit.orbit_id, family_label(orbit), orbit.action_energy, amp, phase, sig, damp,
                  amp * damp * math.cos(phase + sig), orbit.t, orbit.t_prime)


def sc_density(query: TransitionQuery, catalogue: Sequence[CompoundOrbit], spec: SystemSpec,
               background: float | None = None, offsets: dict | None = None,
               prefactor_kind: str = "trace", caustic_threshold: float = NEAR_CAUSTIC_DET,
               background_options: dict | None = None) -> DensityResult:
    """Classical background plus the sum over time-reversal representatives.

    ``offsets`` maps family labels to calibrated phase offsets and is only
    applied when given explicitly.
    """
    hbar = spec.hbar
    diag: list[str] = []
    if background is None:
        background = classical_background(query, spec, **(background_options or {}))
    terms = []
    offsets = offsets or {}
    n_orbits = 0
    for o in catalogue:
        n_orbits += 1
        diag.extend(f"orbit {o.orbit_id}: {w}" for w in o.warnings)
        if not o.is_representative:
            continue
        if o.near_caustic or abs(o.det_one_minus_M) < caustic_threshold:
            diag.append(f"orbit {o.orbit_id}: near-caustic term excluded")
            continue
        if not math.isfinite(o.jacobian_det):
            diag.append(f"orbit {o.orbit_id}: missing Jacobian, term excluded")
            continue
        terms.append(sc_term(o, hbar, spec.dof, offsets.get(family_label(o), 0.0), prefactor_kind))
    if n_orbits == 0:
        diag.append("no classical transition: empty orbit catalogue")
    value = background + math.fsum(t.value for t in terms)
    return DensityResult(query, float(value), "semiclassical", terms=terms, diagnostics=diag,
                         background=float(background),
                         extra={"n_orbits": n_orbits, "prefactor": prefactor_kind})


# ---------------------------------------------------------------------------
# classical background

@dataclass
class BackgroundGrid:
    """Tensor grid of both shell Hamiltonians, reusable across ``epsilon`` and ``hbar``."""

    H: np.ndarray
    H_driven: np.ndarray
    cell: float
    spacing: float


def background_box(query: TransitionQuery, spec: SystemSpec, margin: float = 0.3) -> np.ndarray:
    """Axis-aligned box (rows lo, hi) containing both shells plus a relative margin."""
    cE = trace_contour(query.E, spec, n_samples=256).points
    cD = trace_contour(query.E_prime, spec, n_samples=256).points
    if query.tau:
        cD = drive_points(spec, cD, query.tau).x
    pts = np.vstack([cE, cD])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    return np.array([lo - margin * span, hi + margin * span])


def background_grid(query: TransitionQuery, spec: SystemSpec, spacing: float,
                    box: np.ndarray | None = None, chunk: int = 1 << 17) -> BackgroundGrid:
    if spec.dof != 1:
        raise NotImplementedError("tensor-grid background is implemented for one degree of freedom")
    box = background_box(query, spec) if box is None else np.asarray(box, dtype=float)
    axes = [np.arange(box[0, k], box[1, k] + 0.5 * spacing, spacing) for k in range(2)]
    Qg, Pg = np.meshgrid(*axes, indexing="ij")
    X = np.stack([Qg.ravel(), Pg.ravel()], axis=-1)
    H = spec.hamiltonian.value(X)
    HD = H
    if query.tau:
        # chunks bound the integrator's stage storage; one trial step over the
        # whole span, error control rejects it if needed
        HD = np.concatenate([
            spec.hamiltonian.value(drive_points(spec, X[k:k + chunk], -query.tau, first_step=1.0).x)
            for k in range(0, len(X), chunk)])
    return BackgroundGrid(H.reshape(Qg.shape), HD.reshape(Qg.shape), spacing ** 2, spacing)


def _grid_integral(g: BackgroundGrid, E: float, Ep: float, eps: float, stride: int = 1) -> float:
    a = lorentzian_delta(E - g.H[::stride, ::stride], eps)
    b = lorentzian_delta(Ep - g.H_driven[::stride, ::stride], eps)
    return float(np.sum(a * b)) * g.cell * stride ** 2


def classical_background(query: TransitionQuery, spec: SystemSpec, spacing: float | None = None,
                         rtol: float = 1e-4, max_refinements: int = 3,
                         box: np.ndarray | None = None) -> float:
    """``(2 pi hbar)^-N  int dx d_eps(E - H(x)) d_eps(E' - H(x|tau))`` on a tensor grid.

    The grid is refined by halving the spacing until the estimates on the
    fine grid and its every-other-point subgrid agree to ``rtol``.
    """
    eps = query.epsilon
    if spacing is None:
        box_ = background_box(query, spec) if box is None else np.asarray(box)
        corners = np.array([[box_[i, 0], box_[j, 1]] for i in range(2) for j in range(2)])
        _, hmin = hamiltonian_minimum(spec.hamiltonian)
        # resolve the Lorentzian width across the shells of interest
        gmax = _shell_gradient_max(spec, max(query.E, query.E_prime, hmin + eps))
        spacing = min(eps / (3.0 * gmax), float(np.min(box_[1] - box_[0])) / 64)
        box = box_
    for _ in range(max_refinements + 1):
        g = background_grid(query, spec, spacing, box)
        fine = _grid_integral(g, query.E, query.E_prime, eps)
        coarse = _grid_integral(g, query.E, query.E_prime, eps, stride=2)
        if abs(fine - coarse) <= rtol * abs(fine) or fine == 0.0:
            return fine / (2 * math.pi * spec.hbar) ** spec.dof
        spacing /= 2
    raise RefinementError(f"background quadrature unconverged: {coarse:.6e} vs {fine:.6e}")


def _shell_gradient_max(spec: SystemSpec, E: float) -> float:
    c = trace_contour(E, spec, n_samples=256)
    return float(np.max(np.linalg.norm(spec.hamiltonian.gradient(c.points), axis=1)))


# ---------------------------------------------------------------------------
# phase-offset calibration

OFFSETS = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)


@dataclass
class CalibrationReport:
    offsets: dict
    residual: float                 # relative L2 mismatch with the fitted offsets
    baseline_residual: float        # same with zero offsets
    conclusive: bool
    note: str = ""
    per_family: dict = field(default_factory=dict)


def _model(term_sets, offsets, n):
    out = np.zeros(n)
    for i, terms in enumerate(term_sets):
        s = 0.0
        for t in terms:
            s += t.amplitude * t.damping * math.cos(t.phase + t.maslov_sigma + offsets.get(t.family, 0.0))
        out[i] = s
    return out


def sigma_calibration(term_sets: Sequence[Sequence[SCTerm]], oracle_oscillatory,
                      detrend: Callable[[np.ndarray], np.ndarray] | None = None,
                      noise_floor: float = 1e-6, sweeps: int = 3,
                      min_gain: float = 1e-3) -> CalibrationReport:
    """Fit one offset from ``{0, pi/2, pi, 3pi/2}`` per orbit family.

    ``term_sets[i]`` are the orbit terms at grid point ``i`` and
    ``oracle_oscillatory[i]`` the oscillatory part of the exact density there.
    ``detrend`` is applied to the model sum before comparison (defaults to
    removing the mean). An offset is only changed when it lowers the relative
    residual by more than ``min_gain``, so families too weak to affect the fit
    keep zero. The fitted offsets are reported, never applied.
    """
    y = np.asarray(oracle_oscillatory, dtype=float)
    n = len(y)
    if detrend is None:
        def detrend(v):
            return v - v.mean()
    families: dict = {}
    for terms in term_sets:
        for t in terms:
            families[t.family] = families.get(t.family, 0.0) + (t.amplitude * t.damping) ** 2
    order = sorted(families, key=lambda f: -families[f])
    scale = float(np.sqrt(np.mean(y ** 2))) if n else 0.0
    if not order or scale <= noise_floor * max(1e-300, float(np.max(np.abs(y)))) or scale == 0.0:
        return CalibrationReport({}, math.nan, math.nan, False,
                                 "oscillation amplitude below noise floor: inconclusive")

    def resid(off):
        return float(np.sqrt(np.mean((detrend(_model(term_sets, off, n)) - y) ** 2))) / scale

    offsets = {f: 0.0 for f in order}
    base = resid(offsets)
    per_family = {}
    for _ in range(sweeps):
        changed = False
        for f in order:
            scores = []
            for o in OFFSETS:
                trial = dict(offsets)
                trial[f] = o
                scores.append(resid(trial))
            k = int(np.argmin(scores))
            best = OFFSETS[k]
            per_family[f] = dict(zip(OFFSETS, scores))
            if best != offsets[f] and scores[OFFSETS.index(offsets[f])] - scores[k] > min_gain:
                offsets[f] = best
                changed = True
        if not changed:
            break
    return CalibrationReport(offsets, resid(offsets), base, True, per_family=per_family)
