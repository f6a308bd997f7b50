"""Hamiltonian flows, variational equations and N=1 energy contours.

All integrations go through :func:`integrate`, which advances a batch of
points under one Hamiltonian. Each point may carry its own duration: the
equations are rescaled to a unit time interval so that one adaptive solve
handles the whole batch. The driven Hamiltonian ``H(x|tau) = H(Phi_L^{-tau} x)``
is never integrated directly; its flow is the conjugate
``Phi_L^{tau} . Phi_H^{t} . Phi_L^{-tau}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize

from .core import PhasePoint, Polynomial, SystemSpec

RTOL = 1e-12
ATOL = 1e-12
ESCAPE_RADIUS = 1e6


class EscapeError(RuntimeError):
    """Trajectory left every bounded region (step-size underflow or blow-up)."""

    def __init__(self, message, last_state=None, last_time=None):
        super().__init__(message)
        self.last_state = last_state
        self.last_time = last_time


class EmptyShellError(ValueError):
    pass


class UnsupportedTopologyError(ValueError):
    pass


def symplectic_form(dof: int) -> np.ndarray:
    """``J`` with ``xdot = J grad H`` for ``x = (q, p)``."""
    n = dof
    J = np.zeros((2 * n, 2 * n))
    J[:n, n:] = np.eye(n)
    J[n:, :n] = -np.eye(n)
    return J


def hamiltonian_for(spec: SystemSpec, which: str) -> Polynomial:
    if which == "intrinsic":
        return spec.hamiltonian
    if which == "driver":
        return spec.driver
    raise ValueError(f"no single generator for {which!r}")


# ---------------------------------------------------------------------------
# batch integrator

@dataclass
class BatchResult:
    x: np.ndarray                 # (K, 2N) final points
    M: np.ndarray | None          # (K, 2N, 2N) tangent maps
    action: np.ndarray | None     # (K,) integral of p.qdot
    samples_x: np.ndarray | None  # (S, K, 2N)
    samples_M: np.ndarray | None  # (S, K, 2N, 2N)
    samples_action: np.ndarray | None
    nfev: int = 0


def integrate(ham: Polynomial, X0, times, *, tangent: bool = False, action: bool = False,
              samples=None, rtol: float = RTOL, atol: float = ATOL,
              escape_radius: float = ESCAPE_RADIUS, first_step: float | None = None) -> BatchResult:
    """Flow every row of ``X0`` for its own time under ``ham``.

    ``times`` is a scalar or one duration per row (negative allowed).
    ``samples`` is an optional increasing array of fractions in ``[0, 1]`` at
    which the whole state is recorded. ``first_step`` (a fraction of the
    span) skips the initial step-size probe, which matters for huge batches.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    K, m = X0.shape
    n = m // 2
    T = np.broadcast_to(np.asarray(times, dtype=float), (K,)).copy()
    J = symplectic_form(n)

    nx = K * m
    nm = K * m * m if tangent else 0
    na = K if action else 0

    y0 = [X0.ravel()]
    if tangent:
        y0.append(np.broadcast_to(np.eye(m), (K, m, m)).ravel())
    if action:
        y0.append(np.zeros(K))
    y0 = np.concatenate(y0)

    def rhs(u, y):
        X = y[:nx].reshape(K, m)
        g = ham.gradient(X)
        v = g @ J.T
        out = [(v * T[:, None]).ravel()]
        if tangent:
            Mt = y[nx:nx + nm].reshape(K, m, m)
            Hs = ham.hessian(X)
            out.append((np.einsum("ij,kjl,klm->kim", J, Hs, Mt) * T[:, None, None]).ravel())
        if action:
            out.append(T * np.einsum("ki,ki->k", X[:, n:], v[:, :n]))
        return np.concatenate(out)

    if np.all(T == 0.0):
        res_y = y0[:, None]
        s_arr = None if samples is None else np.repeat(y0[:, None], len(samples), axis=1)
        return _unpack(res_y[:, -1], s_arr, K, m, tangent, action, 0)

    def escape(u, y):
        return escape_radius - np.max(np.abs(y[:nx]))
    escape.terminal = True

    t_eval = None if samples is None else np.asarray(samples, dtype=float)
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=rtol, atol=atol,
                    t_eval=t_eval, events=escape, first_step=first_step)
    if sol.status != 0:
        last = sol.y[:nx, -1].reshape(K, m) if sol.y.size else X0
        raise EscapeError(f"integration failed: {sol.message}", last, sol.t[-1] if sol.t.size else 0.0)
    if sol.t_events[0].size:
        raise EscapeError("trajectory escaped to infinity", sol.y_events[0][0][:nx].reshape(K, m),
                          float(sol.t_events[0][0]))
    if t_eval is None:
        yend = sol.y[:, -1]
        ys = None
    else:
        ys = sol.y
        yend = ys[:, -1] if t_eval[-1] == 1.0 else None
        if yend is None:
            # need the true end state as well
            sol2 = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=rtol, atol=atol)
            yend = sol2.y[:, -1]
    return _unpack(yend, ys, K, m, tangent, action, sol.nfev)


def _unpack(yend, ys, K, m, tangent, action, nfev) -> BatchResult:
    nx = K * m
    nm = K * m * m if tangent else 0
    x = yend[:nx].reshape(K, m)
    M = yend[nx:nx + nm].reshape(K, m, m) if tangent else None
    A = yend[nx + nm:nx + nm + K] if action else None
    sx = sM = sA = None
    if ys is not None:
        S = ys.shape[1]
        sx = ys[:nx].T.reshape(S, K, m)
        if tangent:
            sM = ys[nx:nx + nm].T.reshape(S, K, m, m)
        if action:
            sA = ys[nx + nm:nx + nm + K].T
    return BatchResult(x, M, A, sx, sM, sA, nfev)


# ---------------------------------------------------------------------------
# driver maps and the driven Hamiltonian

def drive_points(spec: SystemSpec, X, tau, *, tangent: bool = False, action: bool = False,
                 **options) -> BatchResult:
    """Apply the driver flow ``Phi_L^{tau}`` to a batch of points."""
    return integrate(spec.driver, X, tau, tangent=tangent, action=action, **options)


def driver_generating_function(spec: SystemSpec, X, tau) -> np.ndarray:
    """Lagrangian action of the driver flow from each row of ``X`` over ``tau``.

    For ``Y = Phi_L^{tau}(X)`` the difference ``p dq(Y) - p dq(X)`` is the
    differential of this function, which converts line integrals between the
    original and driver-transported coordinates.
    """
    X = np.atleast_2d(X)
    r = drive_points(spec, X, tau, action=True)
    return r.action - tau * spec.driver.value(X)


def driven_hamiltonian(x, tau: float, spec: SystemSpec):
    """Classical driven Hamiltonian ``H(Phi_L^{-tau}(x))``; accepts batches."""
    arr = x.to_array() if isinstance(x, PhasePoint) else np.asarray(x, dtype=float)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    if tau == 0.0:
        vals = spec.hamiltonian.value(X)
    else:
        vals = spec.hamiltonian.value(drive_points(spec, X, -tau).x)
    return float(vals[0]) if single else vals


def driven_gradient(x, tau: float, spec: SystemSpec) -> np.ndarray:
    """Gradient of the driven Hamiltonian, ``M_L(-tau)^T grad H(Phi_L^{-tau} x)``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    r = drive_points(spec, X, -tau, tangent=True)
    g = spec.hamiltonian.gradient(r.x)
    return np.einsum("kji,kj->ki", r.M, g)


# ---------------------------------------------------------------------------
# single-trajectory operations

def _as_array(x0):
    if isinstance(x0, PhasePoint):
        return x0.to_array(), True
    return np.asarray(x0, dtype=float), False


def flow(x0, t: float, spec: SystemSpec, which: str = "intrinsic", tau: float = 0.0):
    """Evolve ``x0`` for time ``t`` under the intrinsic, driver or driven Hamiltonian."""
    arr, was_point = _as_array(x0)
    if not np.all(np.isfinite(arr)) or not math.isfinite(t):
        raise ValueError("flow requires finite inputs")
    if t == 0.0:
        out = arr.copy()
    elif which == "driven":
        y = drive_points(spec, arr, -tau).x if tau else np.atleast_2d(arr)
        y = integrate(spec.hamiltonian, y, t).x
        out = (drive_points(spec, y, tau).x if tau else y)[0]
    else:
        out = integrate(hamiltonian_for(spec, which), arr, t).x[0]
    return PhasePoint.from_array(out) if was_point else out


@dataclass(frozen=True)
class Monodromy:
    matrix: np.ndarray
    time: float

    def symplectic_defect(self) -> float:
        n = self.matrix.shape[0] // 2
        J = symplectic_form(n)
        return float(np.max(np.abs(self.matrix.T @ J @ self.matrix - J)))


def tangent_flow(x0, t: float, spec: SystemSpec, which: str = "intrinsic", tau: float = 0.0) -> Monodromy:
    """Monodromy matrix of the selected flow along the trajectory from ``x0``."""
    arr, _ = _as_array(x0)
    m = arr.size
    if t == 0.0:
        return Monodromy(np.eye(m), 0.0)
    if which == "driven":
        if tau:
            a = drive_points(spec, arr, -tau, tangent=True)
            b = integrate(spec.hamiltonian, a.x, t, tangent=True)
            c = drive_points(spec, b.x, tau, tangent=True)
            M = c.M[0] @ b.M[0] @ a.M[0]
        else:
            M = integrate(spec.hamiltonian, arr, t, tangent=True).M[0]
    else:
        M = integrate(hamiltonian_for(spec, which), arr, t, tangent=True).M[0]
    return Monodromy(M, float(t))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    points: np.ndarray
    energy: float
    max_drift: float


def trajectory(x0, t: float, spec: SystemSpec, n_samples: int = 257,
               which: str = "intrinsic") -> Trajectory:
    arr, _ = _as_array(x0)
    ham = hamiltonian_for(spec, which)
    u = np.linspace(0.0, 1.0, n_samples)
    r = integrate(ham, arr, t, samples=u)
    pts = r.samples_x[:, 0, :]
    e0 = float(ham.value(arr))
    drift = float(np.max(np.abs(ham.value(pts) - e0)))
    return Trajectory(u * t, pts, e0, drift)


# ---------------------------------------------------------------------------
# symplectic fixed-step integrator for separable Hamiltonians

_FR = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_FOREST_RUTH_C = (_FR / 2, (1 - _FR) / 2, (1 - _FR) / 2, _FR / 2)
_FOREST_RUTH_D = (_FR, 1 - 2 * _FR, _FR, 0.0)


def symplectic_flow(x0, t: float, ham: Polynomial, dt: float = 1e-2) -> np.ndarray:
    """Fourth-order Forest-Ruth integration; ``ham`` must be separable."""
    if not ham.is_separable():
        raise ValueError("symplectic_flow needs H = T(p) + V(q)")
    x = np.array(_as_array(x0)[0], dtype=float)
    n = x.size // 2
    steps = max(1, int(math.ceil(abs(t) / dt)))
    h = t / steps
    for _ in range(steps):
        for c, d in zip(_FOREST_RUTH_C, _FOREST_RUTH_D):
            x[:n] += c * h * ham.gradient(x)[n:]
            if d:
                x[n:] -= d * h * ham.gradient(x)[:n]
    return x


# ---------------------------------------------------------------------------
# N = 1 energy contours

@dataclass(frozen=True)
class ShellContour:
    """One closed energy curve sampled uniformly in time over a full period."""

    energy: float
    period: float
    times: np.ndarray
    points: np.ndarray
    which: str = "intrinsic"
    tau: float = 0.0

    @property
    def seed(self) -> np.ndarray:
        return self.points[0]


@lru_cache(maxsize=32)
def _minimum(ham: Polynomial, dof: int) -> tuple[tuple[float, ...], float]:
    best = None
    for start in (0.0, 1.0, -1.0, 2.0, -2.0):
        x0 = np.full(2 * dof, 0.0)
        x0[:dof] = start
        r = minimize(lambda x: float(ham.value(x)), x0, jac=lambda x: ham.gradient(x),
                     method="BFGS", options={"gtol": 1e-12})
        if best is None or r.fun < best.fun:
            best = r
    return tuple(best.x.tolist()), float(best.fun)


def hamiltonian_minimum(ham: Polynomial, dof: int = 1) -> tuple[np.ndarray, float]:
    x, f = _minimum(ham, dof)
    return np.array(x), f


def _seed_on_shell(ham: Polynomial, E: float, xmin: np.ndarray, reach: float = 1e3) -> np.ndarray:
    radii = np.concatenate([[0.0], np.geomspace(1e-3, reach, 400)])
    for axis in (0, 1):
        e = np.zeros(2)
        e[axis] = 1.0
        vals = ham.value(xmin[None, :] + radii[:, None] * e) - E
        idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
        if idx.size:
            i = idx[0]
            g = lambda s: float(ham.value(xmin + s * e)) - E
            s = radii[i] if vals[i] == 0 else brentq(g, radii[i], radii[i + 1], xtol=1e-15, rtol=1e-15)
            return xmin + s * e
    raise UnsupportedTopologyError(f"no compact shell found at E={E}")


def intrinsic_period(ham: Polynomial, seed: np.ndarray, max_time: float = 1e3,
                     closure_tol: float = 1e-8) -> float:
    """First return time of ``seed`` to the half-line transversal to the flow."""
    J = symplectic_form(1)
    v0 = J @ ham.gradient(seed)
    speed = float(np.linalg.norm(v0))
    if speed == 0.0:
        raise UnsupportedTopologyError("seed is an equilibrium")
    scale = max(1.0, float(np.linalg.norm(seed)))

    def rhs(t, y):
        return J @ ham.gradient(y)

    def section(t, y):
        return float((y - seed) @ v0)
    section.terminal = True
    section.direction = 1.0

    def escape(t, y):
        return ESCAPE_RADIUS - float(np.max(np.abs(y)))
    escape.terminal = True

    delta = 1e-3 * scale / speed
    y = integrate(ham, seed, delta).x[0]
    t0 = delta
    while t0 < max_time:
        sol = solve_ivp(rhs, (t0, max_time), y, method="DOP853", rtol=RTOL, atol=ATOL,
                        events=(section, escape))
        if sol.t_events[1].size or sol.status == -1:
            raise UnsupportedTopologyError("shell is not compact (trajectory escaped)")
        if not sol.t_events[0].size:
            break
        T = float(sol.t_events[0][0])
        yT = sol.y_events[0][0]
        if np.linalg.norm(yT - seed) < 1e-6 * scale:
            # polish with a Newton step along the flow
            for _ in range(3):
                end = integrate(ham, seed, T).x[0]
                v = J @ ham.gradient(end)
                T -= float((end - seed) @ v) / float(v @ v)
            end = integrate(ham, seed, T).x[0]
            if np.linalg.norm(end - seed) > closure_tol * scale:
                raise UnsupportedTopologyError("contour failed to close")
            return T
        y = integrate(ham, yT, 1e-3 * scale / speed).x[0]
        t0 = T + 1e-3 * scale / speed
    raise UnsupportedTopologyError("no return to the section within max_time")


def trace_contour(E: float, spec: SystemSpec, which: str = "intrinsic", tau: float = 0.0,
                  n_samples: int = 512) -> ShellContour:
    """Trace the closed N=1 energy shell ``H = E`` (or its driven image).

    Results are memoized; the returned arrays are read-only.
    """
    return _trace_contour(float(E), spec.hamiltonian, spec.driver, spec.dof, which,
                          float(tau) if which == "driven" else 0.0, int(n_samples))


@lru_cache(maxsize=256)
def _trace_contour(E, hamiltonian, driver, dof, which, tau, n_samples) -> ShellContour:
    spec = SystemSpec(hamiltonian, driver, 1.0, dof)
    if spec.dof != 1:
        raise ValueError("trace_contour supports N = 1 only")
    if which not in ("intrinsic", "driven", "driver"):
        raise ValueError(f"unknown flow {which!r}")
    ham = spec.driver if which == "driver" else spec.hamiltonian
    xmin, hmin = hamiltonian_minimum(ham)
    if E < hmin:
        raise EmptyShellError(f"E={E} lies below the minimum {hmin:.6g}")
    if E == hmin:
        raise EmptyShellError(f"E={E} is the minimum; the shell is a point")
    seed = _seed_on_shell(ham, E, xmin)
    T = intrinsic_period(ham, seed)
    u = np.arange(n_samples) / n_samples
    r = integrate(ham, seed, T, samples=u)
    pts = r.samples_x[:, 0, :]
    if which == "driven" and tau:
        pts = drive_points(spec, pts, tau).x
    pts = np.ascontiguousarray(pts)
    times = u * T
    pts.flags.writeable = False
    times.flags.writeable = False
    return ShellContour(float(E), float(T), times, pts, which, float(tau))
