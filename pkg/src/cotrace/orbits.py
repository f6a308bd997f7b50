"""Closed compound orbits: shell intersections, segment times, actions,
monodromies, time-energy Jacobians and caustic indices.

For N = 1 a compound orbit is a pair of arcs, one on the shell ``H = E`` and
one on the driven shell ``H(x|tau) = E'``, joined at two shell
intersections ``a`` and ``b``: the ``E`` arc runs ``a -> b`` in signed time
``t`` and the driven arc runs ``b -> a`` in signed time ``t'``. The driven arc
is computed in pulled-back coordinates ``y = Phi_L^{-tau}(x)``, where it is an
ordinary arc of ``H`` at energy ``E'``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .core import SystemSpec, TransitionQuery
from .dynamics import (
    EmptyShellError,
    Monodromy,
    drive_points,
    integrate,
    intrinsic_period,
    symplectic_form,
    trace_contour,
)

log = logging.getLogger(__name__)

TANGENCY_ANGLE = 1e-4
NEAR_CAUSTIC_DET = 1e-6
POLISH_TOL = 1e-12


class ClosureError(ValueError):
    pass


class BifurcationError(RuntimeError):
    """Orbit could not be continued to displaced energies."""


class NoConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# intersections

@dataclass(frozen=True)
class ShellIntersection:
    point: np.ndarray
    tangency_flag: bool
    grazing_angle: float
    contour_time: float = float("nan")


def _grazing_angle(spec, X, tau):
    gH = spec.hamiltonian.gradient(X)
    r = drive_points(spec, X, -tau, tangent=True)
    gD = np.einsum("kji,kj->ki", r.M, spec.hamiltonian.gradient(r.x))
    cross = gH[:, 0] * gD[:, 1] - gH[:, 1] * gD[:, 0]
    nrm = np.linalg.norm(gH, axis=1) * np.linalg.norm(gD, axis=1)
    return np.arcsin(np.clip(np.abs(cross) / nrm, 0.0, 1.0)), cross, gH, gD


def polish_intersections(spec: SystemSpec, X, E: float, E_prime: float, tau: float,
                         tol: float = POLISH_TOL, max_iter: int = 30) -> np.ndarray:
    """Newton iteration on ``(H - E, H(.|tau) - E')`` for a batch of points."""
    X = np.array(np.atleast_2d(X), dtype=float)
    for _ in range(max_iter):
        r = drive_points(spec, X, -tau, tangent=True)
        F = np.stack([spec.hamiltonian.value(X) - E, spec.hamiltonian.value(r.x) - E_prime], axis=1)
        gH = spec.hamiltonian.gradient(X)
        gD = np.einsum("kji,kj->ki", r.M, spec.hamiltonian.gradient(r.x))
        Jm = np.stack([gH, gD], axis=1)
        dX = np.linalg.solve(Jm, -F[..., None])[..., 0]
        X = X + dX
        if np.max(np.abs(dX)) < tol * max(1.0, float(np.max(np.abs(X)))):
            break
    else:
        raise BifurcationError("intersection polishing did not converge")
    return X


def shell_intersections(query: TransitionQuery, spec: SystemSpec, n_samples: int = 512,
                        tangency_angle: float = TANGENCY_ANGLE) -> list[ShellIntersection]:
    """All intersections of the ``E`` shell with the driven ``E'`` shell (N = 1)."""
    if spec.dof != 1:
        raise ValueError("shell_intersections supports N = 1 only")
    E, Ep, tau = query.E, query.E_prime, query.tau
    cE = trace_contour(E, spec, n_samples=n_samples)
    trace_contour(Ep, spec, n_samples=16)  # raises for an empty or open E' shell
    ham = spec.hamiltonian
    pts, s = cE.points, cE.times
    n = len(s)
    g = ham.value(drive_points(spec, pts, -tau).x) - Ep
    T = cE.period
    h = T / n

    def point_at(si):
        k = int(np.floor(si / h)) % n
        return integrate(ham, pts[k], si - s[k]).x[0]

    found: list[ShellIntersection] = []
    brackets = [i for i in range(n) if g[i] == 0.0 or g[i] * g[(i + 1) % n] < 0]
    roots = []
    for i in brackets:
        if g[i] == 0.0:
            roots.append((s[i], pts[i]))
            continue
        lam = g[i] / (g[i] - g[(i + 1) % n])
        roots.append((s[i] + lam * h, pts[i] + lam * (pts[(i + 1) % n] - pts[i])))
    if roots:
        X = polish_intersections(spec, np.array([r[1] for r in roots]), E, Ep, tau)
        ang = _grazing_angle(spec, X, tau)[0]
        for (si, _), x, a in zip(roots, X, ang):
            found.append(ShellIntersection(x, bool(a < tangency_angle), float(a), float(si)))

    # touching zeros: |g| has a local minimum close to zero with no sign change
    scale = max(1.0, abs(Ep))
    for i in range(n):
        gm, g0, gp = g[i - 1], g[i], g[(i + 1) % n]
        if not (abs(g0) <= abs(gm) and abs(g0) <= abs(gp) and gm * g0 > 0 and g0 * gp > 0):
            continue
        if abs(g0) > 1e-2 * scale:
            continue
        cross = lambda si: float(_grazing_angle(spec, point_at(si)[None, :], tau)[1][0])
        lo, hi = s[i] - h, s[i] + h
        try:
            si = brentq(cross, lo, hi, xtol=1e-14)
        except ValueError:
            continue
        x = point_at(si)
        resid = float(ham.value(drive_points(spec, x, -tau).x)[0] - Ep)
        if abs(resid) < 1e-8 * scale:
            a = float(_grazing_angle(spec, x[None, :], tau)[0][0])
            found.append(ShellIntersection(x, True, a, float(si % T)))

    found.sort(key=lambda r: r.contour_time)
    return _merge_near(found, tangency_angle)


def _merge_near(found, tangency_angle):
    out: list[ShellIntersection] = []
    for f in found:
        if out and np.linalg.norm(f.point - out[-1].point) < 1e-3 and \
                min(f.grazing_angle, out[-1].grazing_angle) < 10 * tangency_angle:
            mid = 0.5 * (f.point + out[-1].point)
            out[-1] = ShellIntersection(mid, True, min(f.grazing_angle, out[-1].grazing_angle),
                                        out[-1].contour_time)
        else:
            out.append(f)
    if len(out) > 1 and np.linalg.norm(out[0].point - out[-1].point) < 1e-3 and \
            min(out[0].grazing_angle, out[-1].grazing_angle) < 10 * tangency_angle:
        last = out.pop()
        out[0] = ShellIntersection(0.5 * (out[0].point + last.point), True,
                                   min(out[0].grazing_angle, last.grazing_angle), out[0].contour_time)
    return out


# ---------------------------------------------------------------------------
# segment times

def refine_arc_time(ham, a: np.ndarray, b: np.ndarray, t: float, tol: float = 1e-11,
                    max_iter: int = 20) -> float:
    """Newton-correct ``t`` so that the flow from ``a`` for time ``t`` lands on ``b``."""
    return float(refine_arc_times(ham, np.atleast_2d(a), np.atleast_2d(b), [t], tol, max_iter)[0])


def refine_arc_times(ham, A, B, T, tol: float = 1e-11, max_iter: int = 20) -> np.ndarray:
    """Batched :func:`refine_arc_time`: one integration per Newton sweep."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    T = np.array(T, dtype=float).ravel()
    J = symplectic_form(A.shape[1] // 2)
    scale = np.maximum(1.0, np.linalg.norm(B, axis=1))
    for _ in range(max_iter):
        end = integrate(ham, A, T).x
        d = B - end
        err = np.linalg.norm(d, axis=1)
        if np.all(err < tol * scale):
            return T
        v = ham.gradient(end) @ J.T
        T = T + np.einsum("ki,ki->k", d, v) / np.einsum("ki,ki->k", v, v)
    end = integrate(ham, A, T).x
    if np.any(np.linalg.norm(B - end, axis=1) > 1e-8 * scale):
        raise ClosureError("arc refinement did not reach its endpoint")
    return T


@dataclass
class SegmentCatalogue:
    """Base arc times between intersections on both shells.

    ``arc_E[(i, k)]`` is the forward time in ``(0, T)`` from intersection ``i``
    to ``k`` on the ``E`` shell; ``arc_D[(k, i)]`` the same on the driven shell.
    Winding ``j`` adds ``j`` periods; negative ``j`` gives backward traversal.
    """

    query: TransitionQuery
    points: np.ndarray          # (n, 2) transversal intersections
    pulled: np.ndarray          # (n, 2) points pulled back by the driver
    period_E: float
    period_D: float
    arc_E: dict
    arc_D: dict
    j_max: int

    def windings(self):
        return range(-self.j_max - 1, self.j_max + 1)

    def times_E(self, i, k):
        base = self.arc_E[(i, k)] if i != k else 0.0
        return [(j, base + j * self.period_E) for j in self.windings() if i != k or j != 0]

    def times_D(self, k, i):
        base = self.arc_D[(k, i)] if i != k else 0.0
        return [(j, base + j * self.period_D) for j in self.windings() if i != k or j != 0]


def default_j_max(query: TransitionQuery, hbar: float, period: float, cutoff: float = 1e-6) -> int:
    return max(0, int(math.ceil(hbar * math.log(1.0 / cutoff) / (query.epsilon * period))))


def _contour_time_of(contour, x):
    k = int(np.argmin(np.linalg.norm(contour.points - x, axis=1)))
    return contour.times[k]


def segment_times(intersections, query: TransitionQuery, spec: SystemSpec,
                  j_max: int | None = None) -> SegmentCatalogue:
    """Base arc times (both shells, every ordered pair) plus periods."""
    pts = np.array([x.point for x in intersections if not x.tangency_flag])
    if len(pts) < 2:
        raise ValueError("need at least two transversal intersections")
    ham = spec.hamiltonian
    cE = trace_contour(query.E, spec)
    cD = trace_contour(query.E_prime, spec)
    pulled = drive_points(spec, pts, -query.tau).x
    sE = [_contour_time_of(cE, x) for x in pts]
    sD = [_contour_time_of(cD, y) for y in pulled]
    n = len(pts)
    keys = [(i, k) for i in range(n) for k in range(n) if i != k]
    A = np.array([pts[i] for i, _ in keys] + [pulled[i] for i, _ in keys])
    B = np.array([pts[k] for _, k in keys] + [pulled[k] for _, k in keys])
    T0 = [(sE[k] - sE[i]) % cE.period for i, k in keys] + [(sD[k] - sD[i]) % cD.period for i, k in keys]
    T = refine_arc_times(ham, A, B, T0)
    arc_E = dict(zip(keys, T[:len(keys)].tolist()))
    arc_D = dict(zip(keys, T[len(keys):].tolist()))
    if j_max is None:
        j_max = default_j_max(query, spec.hbar, min(cE.period, cD.period))
    return SegmentCatalogue(query, pts, pulled, cE.period, cD.period, arc_E, arc_D, j_max)


def continue_catalogue(cat: SegmentCatalogue, spec: SystemSpec, E: float, E_prime: float,
                       periods: bool = True) -> SegmentCatalogue:
    """Re-solve the catalogue at nearby energies by warm-started polishing."""
    return continue_catalogues(cat, spec, [(E, E_prime)], periods)[0]


def continue_catalogues(cat: SegmentCatalogue, spec: SystemSpec, energies, periods: bool = True):
    """:func:`continue_catalogue` for several ``(E, E')`` pairs in one batch."""
    tau = cat.query.tau
    ham = spec.hamiltonian
    n = len(cat.points)
    en = np.asarray(energies, dtype=float).reshape(-1, 2)
    m = len(en)
    X0 = np.tile(cat.points, (m, 1))
    Es = np.repeat(en[:, 0], n)
    Eps = np.repeat(en[:, 1], n)
    pts = polish_intersections(spec, X0, Es, Eps, tau)
    if np.max(np.linalg.norm(pts - X0, axis=1)) > 0.25:
        raise BifurcationError("intersection moved too far under continuation")
    pulled = drive_points(spec, pts, -tau).x if tau else pts
    pts = pts.reshape(m, n, -1)
    pulled = pulled.reshape(m, n, -1)
    kE, kD = list(cat.arc_E), list(cat.arc_D)
    A, B, T0 = [], [], []
    for c in range(m):
        A += [pts[c, i] for i, _ in kE] + [pulled[c, i] for i, _ in kD]
        B += [pts[c, k] for _, k in kE] + [pulled[c, k] for _, k in kD]
        T0 += [cat.arc_E[key] for key in kE] + [cat.arc_D[key] for key in kD]
        if periods:
            A += [pts[c, 0], pulled[c, 0]]
            B += [pts[c, 0], pulled[c, 0]]
            T0 += [cat.period_E, cat.period_D]
    T = refine_arc_times(ham, np.array(A), np.array(B), T0) if A else np.zeros(0)
    per = len(kE) + len(kD) + (2 if periods else 0)
    out = []
    for c in range(m):
        blk = T[c * per:(c + 1) * per]
        arc_E = dict(zip(kE, blk[:len(kE)].tolist()))
        arc_D = dict(zip(kD, blk[len(kE):len(kE) + len(kD)].tolist()))
        TE, TD = (float(blk[-2]), float(blk[-1])) if periods else (cat.period_E, cat.period_D)
        q = replace(cat.query, E=float(en[c, 0]), E_prime=float(en[c, 1]))
        out.append(SegmentCatalogue(q, pts[c], pulled[c], TE, TD, arc_E, arc_D, cat.j_max))
    return out


# ---------------------------------------------------------------------------
# compound paths, actions and indices

def symplectic_area(segments, closure_tol: float = 1e-7, levels: int = 4) -> float:
    """``sum p . dq`` around a closed chain of sampled segments.

    Each segment is an array ``(2**k + 1, 2N)`` sampled uniformly in a smooth
    parameter. The trapezoid sum is Richardson-extrapolated over successive
    halvings of the sample set.
    """
    segs = [np.atleast_2d(np.asarray(s, dtype=float)) for s in segments]
    for a, b in zip(segs, segs[1:] + segs[:1]):
        if np.linalg.norm(a[-1] - b[0]) > closure_tol * max(1.0, float(np.linalg.norm(a[-1]))):
            raise ClosureError("segments do not form a closed chain")
    total = 0.0
    for s in segs:
        n = s.shape[1] // 2
        m = s.shape[0] - 1
        if m == 0:
            continue
        ests = []
        step = 1
        while m % step == 0 and len(ests) < levels and m // step >= 2:
            sub = s[::step]
            q, p = sub[:, :n], sub[:, n:]
            ests.append(float(np.sum(0.5 * (p[1:] + p[:-1]) * (q[1:] - q[:-1]))))
            step *= 2
        if not ests:
            q, p = s[:, :n], s[:, n:]
            ests = [float(np.sum(0.5 * (p[1:] + p[:-1]) * (q[1:] - q[:-1])))]
        # Romberg table over halvings (ests[0] finest)
        table = ests[::-1]
        for k in range(1, len(table)):
            f = 4.0 ** k
            table = [(f * table[i + 1] - table[i]) / (f - 1) for i in range(len(table) - 1)]
        total += table[-1]
    return total


@dataclass
class CompoundPath:
    """Linearized compound flow sampled along both segments."""

    x_E: np.ndarray            # samples on the E segment
    x_D: np.ndarray            # samples on the driven segment (original coordinates)
    psi: np.ndarray            # (S, 2N, 2N) tangent path, I -> M(t, t')
    action: float              # line integral of p dq along both segments
    monodromy_E: np.ndarray
    monodromy_D: np.ndarray
    start_form: np.ndarray     # generator Hessian at the start of the path


def compound_path(spec: SystemSpec, x0, t: float, t_prime: float, tau: float,
                  samples_per_unit: float = 40.0, min_samples: int = 65) -> CompoundPath:
    """Sample the compound trajectory starting at ``x0``: ``H`` for ``t``, then driven for ``t'``."""
    return compound_paths(spec, [x0], [t], [t_prime], tau, samples_per_unit, min_samples)[0]


def compound_paths(spec: SystemSpec, X0, ts, t_primes, tau: float, samples_per_unit: float = 40.0,
                   min_samples: int = 65) -> list[CompoundPath]:
    """Batched :func:`compound_path`; all paths share the finest sampling any of them needs."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    K, m = X0.shape
    ts = np.asarray(ts, dtype=float)
    tps = np.asarray(t_primes, dtype=float)
    ham = spec.hamiltonian

    def nsamp(dt):
        return max(min_samples, int(math.ceil(samples_per_unit * float(np.max(np.abs(dt))))) + 1)

    uE = np.linspace(0.0, 1.0, nsamp(ts))
    rE = integrate(ham, X0, ts, tangent=True, action=True, samples=uE)
    xE, ME, AE = rE.samples_x, rE.samples_M, rE.action      # (S, K, ...)
    X1 = rE.x
    if tau:
        pb = drive_points(spec, X1, -tau, tangent=True)
        Y0, P = pb.x, pb.M
    else:
        Y0, P = X1, np.broadcast_to(np.eye(m), (K, m, m))
    uD = np.linspace(0.0, 1.0, nsamp(tps))
    rD = integrate(ham, Y0, tps, tangent=True, action=True, samples=uD)
    ys, MH = rD.samples_x, rD.samples_M
    S = len(uD)
    AD = np.array(rD.action, dtype=float)
    if tau:
        flat = ys.reshape(S * K, m)
        fw = integrate(spec.driver, flat, tau, tangent=True, action=True)
        xD, Q = fw.x.reshape(S, K, m), fw.M.reshape(S, K, m, m)
        F = (fw.action - tau * spec.driver.value(flat)).reshape(S, K)
        AD = AD + F[-1] - F[0]
    else:
        xD, Q = ys, np.broadcast_to(np.eye(m), MH.shape)
    MD = np.einsum("skij,skjl,klm->skim", Q, MH, P)
    Jm = symplectic_form(m // 2)
    out = []
    for k in range(K):
        psi = np.concatenate([ME[:, k], np.einsum("sij,jl->sil", MD[1:, k], ME[-1, k])], axis=0)
        if ts[k] != 0.0:
            start = ts[k] * ham.hessian(X0[k])
        else:
            # generator of the driven segment at the start, from the sampled path
            Kd = (MD[1, k] - MD[0, k]) / (uD[1] - uD[0])
            start = -Jm @ Kd
            start = 0.5 * (start + start.T)
        out.append(CompoundPath(xE[:, k], xD[:, k], psi, float(AE[k] + AD[k]), ME[-1, k], MD[-1, k], start))
    return out


def _signature(S: np.ndarray) -> int:
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    tol = 1e-12 * max(1.0, float(np.max(np.abs(w))))
    return int(np.sum(w > tol) - np.sum(w < -tol))


@dataclass(frozen=True)
class CausticCount:
    count: int                  # zeros of det[I - M] met in the interior of the path
    maslov_index: int           # crossing index (start contributes half its signature)
    near_caustic_end: bool
    det_end: float


def crossing_index(psi: np.ndarray, start_form: np.ndarray) -> CausticCount:
    """Count zeros of ``det[I - psi(s)]`` along a sampled symplectic path.

    Each zero is weighted by the signature of the crossing form restricted to
    ``ker(I - psi)``; the degenerate start ``psi(0) = I`` contributes half the
    signature of ``start_form``.
    """
    m = psi.shape[1]
    Jm = symplectic_form(m // 2)
    I = np.eye(m)
    d = np.array([np.linalg.det(I - P) for P in psi])
    scale = max(1.0, float(np.max(np.abs(d))))
    count = 0
    index2 = _signature(start_form)      # twice the index
    S_total = len(psi)

    def form_at(i, lam):
        P = psi[i] + lam * (psi[i + 1] - psi[i])
        K = (psi[i + 1] - psi[i]) @ np.linalg.inv(P)
        S = -Jm @ K
        return P, 0.5 * (S + S.T)

    for i in range(1, S_total - 1):
        a, b = d[i], d[i + 1]
        if a == 0.0 or a * b < 0:
            if a == 0.0:
                lam = 0.0
            else:
                lam = brentq(lambda l: np.linalg.det(I - (psi[i] + l * (psi[i + 1] - psi[i]))), 0.0, 1.0)
            P, S = form_at(i, lam)
            _, sv, vt = np.linalg.svd(I - P)
            v = vt[-1]
            count += 1
            index2 += 2 * int(np.sign(v @ S @ v))
        elif 1 < i and abs(a) <= abs(d[i - 1]) and abs(a) <= abs(b) and d[i - 1] * a > 0 and a * b > 0:
            # touching zero: refine along the interpolated path
            best = min((abs(np.linalg.det(I - (psi[i] + l * (psi[i + 1] - psi[i])))), l)
                       for l in np.linspace(-0.5, 0.5, 41) if 0 <= i + l)
            near = abs(a) < 1e-3 * scale and best[0] < 1e-4 * scale
            if near:
                P, S = form_at(i, 0.0)
                _, sv, vt = np.linalg.svd(I - P)
                ker = vt[sv < max(1e-2, 10 * sv[-1])] if sv[-1] > 0 else vt[-1:]
                if ker.size == 0:
                    ker = vt[-1:]
                count += 1
                index2 += 2 * _signature(ker @ S @ ker.T) // max(1, 1)
    det_end = float(d[-1])
    near_end = abs(det_end) < NEAR_CAUSTIC_DET
    return CausticCount(count, index2 // 2, near_end, det_end)


def caustic_counter(spec: SystemSpec, x0, t: float, t_prime: float, tau: float,
                    samples_per_unit: float = 40.0) -> CausticCount:
    """Caustic count along the compound path from short times to ``(t, t')``."""
    if t == 0.0 and t_prime == 0.0:
        return CausticCount(0, 0, True, 0.0)
    path = compound_path(spec, x0, t, t_prime, tau, samples_per_unit)
    return crossing_index(path.psi, path.start_form)


# ---------------------------------------------------------------------------
# compound orbits

@dataclass
class CompoundOrbit:
    query: TransitionQuery
    endpoints: tuple[ShellIntersection, ShellIntersection]
    pair: tuple[int, int]
    j: int
    t: float
    j_prime: int
    t_prime: float
    action_energy: float
    action_time: float
    monodromy: Monodromy
    det_one_minus_M: float
    caustic_index: int
    maslov_index: int
    jacobian_tE: np.ndarray | None = None
    jacobian_det: float = float("nan")
    inverse_jacobian_det: float = float("nan")
    near_caustic: bool = False
    closure_residual: float = 0.0
    warnings: list[str] = field(default_factory=list)
    orbit_id: int = -1
    periods: tuple[float, float] = (float("nan"), float("nan"))

    @property
    def family(self) -> tuple:
        return (self.pair, self.j, self.j_prime)

    @property
    def is_representative(self) -> bool:
        """One member of each time-reversal pair (``t > 0``, or ``t = 0`` and ``t' > 0``)."""
        return self.t > 0 or (self.t == 0 and self.t_prime > 0)

    def damping(self, hbar: float) -> float:
        return math.exp(-self.query.epsilon * (abs(self.t) + abs(self.t_prime)) / hbar)

    def to_record(self) -> dict:
        a, b = self.endpoints
        rec = {
            "orbit_id": self.orbit_id,
            "E": self.query.E,
            "Eprime": self.query.E_prime,
            "tau": self.query.tau,
            "j": self.j,
            "jprime": self.j_prime,
            "t": self.t,
            "tprime": self.t_prime,
            "S_energy": self.action_energy,
            "S_time": self.action_time,
            "det_IminusM": self.det_one_minus_M,
            "jacobian_det": self.jacobian_det,
            "caustic_index": self.caustic_index,
            "maslov_index": self.maslov_index,
            "near_caustic": self.near_caustic,
        }
        n = a.point.size // 2
        for lab, pt in (("a", a.point), ("b", b.point)):
            for k in range(n):
                rec[f"{lab}_q{k + 1}"] = float(pt[k])
                rec[f"{lab}_p{k + 1}"] = float(pt[n + k])
        return rec


def _build_orbit(spec, query, ends, pair, j, t, jp, tp, periods, path=None) -> CompoundOrbit:
    a, b = ends
    if path is None:
        path = compound_path(spec, a.point, t, tp, query.tau, samples_per_unit=100.0 / min(periods))
    M = path.monodromy_D @ path.monodromy_E
    m = M.shape[0]
    det = float(np.linalg.det(np.eye(m) - M))
    cc = crossing_index(path.psi, path.start_form)
    resid = max(float(np.linalg.norm(path.x_E[-1] - b.point)),
                float(np.linalg.norm(path.x_D[-1] - a.point)))
    S_E = path.action
    orb = CompoundOrbit(
        query=query, endpoints=(a, b), pair=pair, j=j, t=float(t), j_prime=jp, t_prime=float(tp),
        action_energy=S_E, action_time=S_E - query.E * t - query.E_prime * tp,
        monodromy=Monodromy(M, float(t + tp)), det_one_minus_M=det,
        caustic_index=cc.count, maslov_index=cc.maslov_index, closure_residual=resid,
        periods=(float(periods[0]), float(periods[1])),
    )
    if resid > 1e-7:
        orb.warnings.append(f"closure residual {resid:.2e}")
    if a.tangency_flag or b.tangency_flag:
        orb.near_caustic = True
        orb.warnings.append("tangent endpoint (near-caustic)")
    if abs(det) < NEAR_CAUSTIC_DET:
        orb.near_caustic = True
        orb.warnings.append(f"|det[I-M]| = {abs(det):.2e} (near-caustic)")
    return orb


def _tangency_orbits(query, spec, tangents, j_max, periods):
    out = []
    for x in tangents:
        orb = CompoundOrbit(
            query=query, endpoints=(x, x), pair=(-1, -1), j=0, t=0.0, j_prime=0, t_prime=0.0,
            action_energy=0.0, action_time=0.0, monodromy=Monodromy(np.eye(2 * spec.dof), 0.0),
            det_one_minus_M=0.0, caustic_index=0, maslov_index=0, near_caustic=True,
            warnings=["zero-length orbit at shell tangency (near-caustic)"],
            periods=(float(periods[0]), float(periods[1])),
        )
        out.append(orb)
    return out


def compound_orbits(query: TransitionQuery, spec: SystemSpec, j_max: int | None = None,
                    damping_cutoff: float = 1e-6, jacobian: bool = True,
                    n_samples: int = 512) -> list[CompoundOrbit]:
    """All closed compound orbits of a query that survive the damping cutoff."""
    xs = shell_intersections(query, spec, n_samples=n_samples)
    trans = [x for x in xs if not x.tangency_flag]
    tangents = [x for x in xs if x.tangency_flag]
    if len(trans) < 2:
        periods = (trace_contour(query.E, spec, n_samples=16).period,
                   trace_contour(query.E_prime, spec, n_samples=16).period) if tangents else (1.0, 1.0)
        orbits = _tangency_orbits(query, spec, tangents, j_max or 0, periods)
        for k, o in enumerate(orbits):
            o.orbit_id = k
        return orbits
    cat = segment_times(trans, query, spec, j_max)
    hbar = spec.hbar
    found = []
    n = len(trans)
    for i in range(n):
        for k in range(n):
            if i == k and cat.j_max < 1:
                continue
            for j, t in cat.times_E(i, k):
                for jp, tp in cat.times_D(k, i):
                    damp = math.exp(-query.epsilon * (abs(t) + abs(tp)) / hbar)
                    if damp >= damping_cutoff:
                        found.append((i, k, j, t, jp, tp))
    periods = (cat.period_E, cat.period_D)
    paths = compound_paths(spec, [trans[f[0]].point for f in found], [f[3] for f in found],
                           [f[5] for f in found], query.tau,
                           samples_per_unit=100.0 / min(periods)) if found else []
    orbits = [_build_orbit(spec, query, (trans[i], trans[k]), (i, k), j, t, jp, tp, periods, path)
              for (i, k, j, t, jp, tp), path in zip(found, paths)]
    if jacobian and orbits:
        derivs = catalogue_derivatives(cat, spec)
        for o in orbits:
            Jm = orbit_jacobian(o, cat, derivs)
            o.jacobian_tE = Jm
            o.jacobian_det = float(np.linalg.det(Jm))
    for k, o in enumerate(orbits):
        o.orbit_id = k
    return orbits


# ---------------------------------------------------------------------------
# time-energy Jacobians

def energy_step(query: TransitionQuery) -> float:
    return max(1e-5, 1e-4 * query.epsilon)


def catalogue_derivatives(cat: SegmentCatalogue, spec: SystemSpec, h: float | None = None) -> dict:
    """Central differences of base arc times and periods over ``(E, E')``."""
    h = energy_step(cat.query) if h is None else h
    E, Ep = cat.query.E, cat.query.E_prime
    steps = {"E+": (h, 0), "E-": (-h, 0), "P+": (0, h), "P-": (0, -h)}
    try:
        conts = continue_catalogues(cat, spec, [(E + a, Ep + b) for a, b in steps.values()])
    except (BifurcationError, ClosureError, np.linalg.LinAlgError) as exc:
        raise BifurcationError(f"orbit lost under energy perturbation: {exc}") from exc
    c = dict(zip(steps, conts))
    out = {"h": h}
    for name, sel in (("arc_E", lambda z: z.arc_E), ("arc_D", lambda z: z.arc_D)):
        out[name] = {
            key: ((sel(c["E+"])[key] - sel(c["E-"])[key]) / (2 * h),
                  (sel(c["P+"])[key] - sel(c["P-"])[key]) / (2 * h))
            for key in sel(cat)
        }
    out["period_E"] = ((c["E+"].period_E - c["E-"].period_E) / (2 * h),
                       (c["P+"].period_E - c["P-"].period_E) / (2 * h))
    out["period_D"] = ((c["E+"].period_D - c["E-"].period_D) / (2 * h),
                       (c["P+"].period_D - c["P-"].period_D) / (2 * h))
    return out


def orbit_jacobian(orbit: CompoundOrbit, cat: SegmentCatalogue, derivs: dict) -> np.ndarray:
    i, k = orbit.pair
    dT = np.array(derivs["period_E"])
    dTp = np.array(derivs["period_D"])
    base_E = np.array(derivs["arc_E"][(i, k)]) if i != k else np.zeros(2)
    base_D = np.array(derivs["arc_D"][(k, i)]) if i != k else np.zeros(2)
    row_t = base_E + orbit.j * dT
    row_tp = base_D + orbit.j_prime * dTp
    return np.array([row_t, row_tp])


def orbit_times(orbit: CompoundOrbit, cat: SegmentCatalogue) -> tuple[float, float]:
    i, k = orbit.pair
    t = (cat.arc_E[(i, k)] if i != k else 0.0) + orbit.j * cat.period_E
    tp = (cat.arc_D[(k, i)] if i != k else 0.0) + orbit.j_prime * cat.period_D
    return t, tp


@dataclass(frozen=True)
class JacobianResult:
    matrix: np.ndarray
    det: float
    inverse_det: float


def jacobian_times_energies(orbit: CompoundOrbit, query: TransitionQuery, spec: SystemSpec,
                            inverse: bool = False) -> JacobianResult:
    """``d(t, t')/d(E, E')`` by re-solving the orbit at displaced energies.

    With ``inverse=True`` the inverse relation ``d(E, E')/d(t, t')`` is also
    obtained independently: energies reproducing displaced times are found by
    Newton iteration and differenced.
    """
    if orbit.near_caustic and (orbit.endpoints[0].tangency_flag or orbit.endpoints[1].tangency_flag):
        raise BifurcationError("orbit ends on a tangency; no smooth continuation")
    pts = [orbit.endpoints[0], orbit.endpoints[1]]
    cat = segment_times(pts, query, spec, j_max=max(abs(orbit.j), abs(orbit.j_prime)))
    cat = _align_catalogue(cat, orbit)
    derivs = catalogue_derivatives(cat, spec)
    Jm = orbit_jacobian(_as_pair01(orbit), cat, derivs)
    inv_det = float("nan")
    if inverse:
        inv_det = float(np.linalg.det(_inverse_jacobian_fd(orbit, cat, spec, Jm)))
    return JacobianResult(Jm, float(np.linalg.det(Jm)), inv_det)


def _align_catalogue(cat, orbit):
    # segment_times above was built from (a, b) in that order -> pair (0, 1)
    return cat


def _as_pair01(orbit):
    o = replace(orbit)
    o.pair = (0, 1) if orbit.pair[0] != orbit.pair[1] else (0, 0)
    return o


def _inverse_jacobian_fd(orbit, cat, spec, Jm, h_t: float | None = None) -> np.ndarray:
    o = _as_pair01(orbit)
    t0, tp0 = orbit_times(o, cat)
    h_t = h_t if h_t is not None else energy_step(cat.query) * float(np.max(np.abs(Jm)))
    E0, Ep0 = cat.query.E, cat.query.E_prime
    Jinv_guess = np.linalg.inv(Jm)

    def solve_for(target):
        e = np.array([E0, Ep0]) + Jinv_guess @ (np.asarray(target) - np.array([t0, tp0]))
        state = cat
        for _ in range(12):
            state = continue_catalogue(state, spec, e[0], e[1])
            tt = np.array(orbit_times(o, state))
            r = np.asarray(target) - tt
            if np.max(np.abs(r)) < 1e-12:
                break
            e = e + Jinv_guess @ r
        return e

    cols = []
    for d in (np.array([h_t, 0.0]), np.array([0.0, h_t])):
        ep = solve_for(np.array([t0, tp0]) + d)
        em = solve_for(np.array([t0, tp0]) - d)
        cols.append((ep - em) / (2 * h_t))
    return np.array(cols).T


def orbit_at(orbit: CompoundOrbit, spec: SystemSpec, E: float, E_prime: float) -> CompoundOrbit:
    """Continue one orbit to nearby energies (no Jacobian)."""
    pts = [orbit.endpoints[0], orbit.endpoints[1]]
    cat = segment_times(pts, orbit.query, spec, j_max=max(abs(orbit.j), abs(orbit.j_prime)))
    new = continue_catalogue(cat, spec, E, E_prime)
    o = _as_pair01(orbit)
    t, tp = orbit_times(o, new)
    q = replace(orbit.query, E=float(E), E_prime=float(E_prime))
    ends = (ShellIntersection(new.points[0], False, orbit.endpoints[0].grazing_angle),
            ShellIntersection(new.points[1], False, orbit.endpoints[1].grazing_angle))
    return _build_orbit(spec, q, ends, orbit.pair, orbit.j, t, orbit.j_prime, tp,
                        (new.period_E, new.period_D))


def time_reversal_partner(orbit: CompoundOrbit, catalogue: list[CompoundOrbit],
                          tol: float = 1e-7) -> CompoundOrbit | None:
    for o in catalogue:
        if abs(o.t + orbit.t) < tol and abs(o.t_prime + orbit.t_prime) < tol and \
                abs(o.action_energy + orbit.action_energy) < 1e-6:
            return o
    return None


def rebased_det(orbit: CompoundOrbit, spec: SystemSpec) -> float:
    """``det[I - M]`` with the compound orbit started at its other endpoint."""
    b = orbit.endpoints[1].point
    tau = orbit.query.tau
    # driven segment first, then the intrinsic one
    m = b.size
    if tau:
        pb = drive_points(spec, b, -tau, tangent=True)
        rD = integrate(spec.hamiltonian, pb.x, orbit.t_prime, tangent=True)
        fw = drive_points(spec, rD.x, tau, tangent=True)
        MD = fw.M[0] @ rD.M[0] @ pb.M[0]
        a = fw.x[0]
    else:
        rD = integrate(spec.hamiltonian, b, orbit.t_prime, tangent=True)
        MD, a = rD.M[0], rD.x[0]
    ME = integrate(spec.hamiltonian, a, orbit.t, tangent=True).M[0]
    return float(np.linalg.det(np.eye(m) - ME @ MD))


# ---------------------------------------------------------------------------
# N >= 2: fixed points of the product section map

@dataclass(frozen=True)
class SectionPlane:
    axis: int = 0
    value: float = 0.0
    direction: int = 1


@dataclass
class PoincareFixedPoint:
    point: np.ndarray            # full phase-space point on the fixed section
    reduced: np.ndarray          # coordinates on the section
    stability: np.ndarray        # reduced stability matrix m(E, E')
    det_one_minus_m: float
    residual: float
    iterations: int
    t: float
    t_prime: float
    action: float
    warnings: list[str] = field(default_factory=list)


def _reduced_indices(dof, axis):
    return [i for i in range(2 * dof) if i not in (axis, dof + axis)]


def _lift(spec, z, plane, E):
    n = spec.dof
    idx = _reduced_indices(n, plane.axis)
    x = np.zeros(2 * n)
    x[idx] = z
    x[plane.axis] = plane.value
    k = n + plane.axis
    # H is quadratic in the section momentum for every named system
    vals = []
    for pk in (0.0, 1.0, -1.0):
        x[k] = pk
        vals.append(float(spec.hamiltonian.value(x)))
    c = vals[0] - E
    a2 = 0.5 * (vals[1] + vals[2]) - vals[0]
    b1 = 0.5 * (vals[1] - vals[2])
    disc = b1 * b1 - 4 * a2 * c
    if a2 <= 0 or disc < 0:
        raise NoConvergenceError("section point has no lift onto the energy shell")
    roots = [(-b1 + math.sqrt(disc)) / (2 * a2), (-b1 - math.sqrt(disc)) / (2 * a2)]
    J = symplectic_form(n)
    for r in roots:
        x[k] = r
        qdot = (J @ spec.hamiltonian.gradient(x))[plane.axis]
        if np.sign(qdot) == plane.direction:
            return x.copy()
    raise NoConvergenceError("no lift with the requested crossing direction")


def _flow_to_event(ham, x0, event, t_max, skip=1e-6, count=1, direction=0.0):
    """Integrate until the ``count``-th zero of ``event(x)``; returns (x, t, action)."""
    from scipy.integrate import solve_ivp
    n = x0.size // 2
    J = symplectic_form(n)

    def rhs(t, y):
        v = J @ ham.gradient(y[:-1])
        return np.concatenate([v, [y[n:2 * n] @ v[:n]]])

    def ev(t, y):
        return event(y[:-1])
    ev.terminal = True
    ev.direction = direction

    y = np.concatenate([x0, [0.0]])
    tt = 0.0
    if skip:
        r = integrate(ham, x0, skip, action=True)
        y = np.concatenate([r.x[0], r.action])
        tt = skip
    for _ in range(count):
        sol = solve_ivp(rhs, (tt, t_max), y, method="DOP853", rtol=1e-12, atol=1e-12,
                        events=ev)
        if not sol.t_events[0].size:
            raise NoConvergenceError("section crossing not found")
        tt = float(sol.t_events[0][0])
        y = sol.y_events[0][0]
        if _ < count - 1:
            r = integrate(ham, y[:-1], skip, action=True)
            y = np.concatenate([r.x[0], [y[-1] + r.action[0]]])
            tt += skip
    return y[:-1], tt, float(y[-1])


def section_map(spec: SystemSpec, query: TransitionQuery, z, plane: SectionPlane,
                j: int = 1, j_prime: int = 1, t_max: float = 200.0):
    """Fixed section -> evolved section -> E shell -> fixed section.

    Returns the image on the fixed section, the lifted start point, both segment
    times and the compound action.
    """
    tau, E, Ep = query.tau, query.E, query.E_prime
    x0 = _lift(spec, np.asarray(z, dtype=float), plane, E)
    ham = spec.hamiltonian

    def driven_level(x):
        y = drive_points(spec, x, -tau).x[0] if tau else x
        return float(ham.value(y)) - Ep

    x1, t1, A1 = _flow_to_event(ham, x0, driven_level, t_max, skip=0.0, count=j)
    # driven leg in pulled-back coordinates: event is the E shell of the pushed point
    y1 = drive_points(spec, x1, -tau).x[0] if tau else x1

    def e_level(y):
        x = drive_points(spec, y, tau).x[0] if tau else y
        return float(ham.value(x)) - E
    y2, t2, A2 = _flow_to_event(ham, y1, e_level, t_max, skip=1e-6, count=j_prime)
    if tau:
        F = driver_gen = integrate(spec.driver, np.array([y1, y2]), tau, action=True)
        Fv = driver_gen.action - tau * spec.driver.value(np.array([y1, y2]))
        A2 += float(Fv[1] - Fv[0])
        x2 = F.x[1]
    else:
        x2 = y2

    def plane_level(x):
        return float(x[plane.axis] - plane.value)
    x3, t3, A3 = _flow_to_event(ham, x2, plane_level, t_max, skip=1e-6,
                                direction=float(plane.direction))
    idx = _reduced_indices(spec.dof, plane.axis)
    return x3[idx], x0, t1 + t3, t2, A1 + A2 + A3


def product_section_fixed_point(query: TransitionQuery, spec: SystemSpec, seed,
                                plane: SectionPlane = SectionPlane(), j: int = 1, j_prime: int = 1,
                                tol: float = 1e-6, max_iter: int = 50,
                                fd_step: float = 1e-6) -> PoincareFixedPoint:
    """Newton search for a fixed point of the product section map (N >= 2)."""
    if spec.dof < 2:
        raise ValueError("product_section_fixed_point is for N >= 2")
    z = np.array(seed, dtype=float)
    it = 0

    def residual(zz):
        img = section_map(spec, query, zz, plane, j, j_prime)
        return img[0] - zz, img

    r, img = residual(z)
    while np.linalg.norm(r) >= tol * 1e-3:
        if it >= max_iter:
            raise NoConvergenceError(f"Newton did not converge in {max_iter} iterations")
        D = np.empty((z.size, z.size))
        for c in range(z.size):
            dz = np.zeros_like(z)
            dz[c] = fd_step
            D[:, c] = (residual(z + dz)[0] - residual(z - dz)[0]) / (2 * fd_step)
        try:
            step = np.linalg.solve(D, -r)
        except np.linalg.LinAlgError:
            raise NoConvergenceError("singular Newton matrix") from None
        z = z + step
        it += 1
        try:
            r, img = residual(z)
        except NoConvergenceError:
            raise
        if not np.all(np.isfinite(r)):
            raise NoConvergenceError("Newton diverged")
    m = np.empty((z.size, z.size))
    for c in range(z.size):
        dz = np.zeros_like(z)
        dz[c] = fd_step
        m[:, c] = (section_map(spec, query, z + dz, plane, j, j_prime)[0]
                   - section_map(spec, query, z - dz, plane, j, j_prime)[0]) / (2 * fd_step)
    det = float(np.linalg.det(np.eye(z.size) - m))
    warns = []
    if abs(det) < 1e-8:
        warns.append("det[I - m] ~ 0: degenerate family")
        log.warning("degenerate compound-orbit family at %s", z)
    _, x0, t, tp, S = img
    return PoincareFixedPoint(x0, z, m, det, float(np.linalg.norm(r)), it, t, tp, S, warns)
