"""Shared domain types, named model systems and the Lorentzian window."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """Raised for non-finite or otherwise invalid numerical inputs."""


# ---------------------------------------------------------------------------
# polynomials in phase space

@dataclass(frozen=True)
class Polynomial:
    """Polynomial in phase space, ``sum_i c_i prod_k q_k^a_ik p_k^b_ik``.

    ``terms`` holds ``(coefficient, exponents)`` pairs where ``exponents`` has
    length ``2 * dof`` (all q exponents first, then p exponents). Every method
    accepts points with shape ``(..., 2 * dof)``.
    """

    terms: tuple[tuple[float, tuple[int, ...]], ...]
    dof: int = 1

    def __post_init__(self):
        for c, e in self.terms:
            if len(e) != 2 * self.dof:
                raise ValueError(f"exponent tuple {e} does not match dof={self.dof}")
            if any(k < 0 for k in e):
                raise ValueError("negative exponents are not polynomial")

    @classmethod
    def from_dict(cls, coeffs: dict[tuple[int, ...], float], dof: int = 1) -> "Polynomial":
        merged: dict[tuple[int, ...], float] = {}
        for e, c in coeffs.items():
            merged[tuple(e)] = merged.get(tuple(e), 0.0) + float(c)
        terms = tuple((c, e) for e, c in sorted(merged.items()) if c != 0.0)
        return cls(terms, dof)

    # arithmetic is only needed to build named systems
    def __add__(self, other: "Polynomial") -> "Polynomial":
        d = {e: c for c, e in self.terms}
        for c, e in other.terms:
            d[e] = d.get(e, 0.0) + c
        return Polynomial.from_dict(d, self.dof)

    def scaled(self, s: float) -> "Polynomial":
        return Polynomial(tuple((s * c, e) for c, e in self.terms), self.dof)

    @property
    def degree(self) -> int:
        return max((sum(e) for _, e in self.terms), default=0)

    def is_separable(self) -> bool:
        """True when no monomial mixes positions with momenta."""
        n = self.dof
        return all(not (any(e[:n]) and any(e[n:])) for _, e in self.terms)

    def momentum_part(self) -> "Polynomial":
        """Terms in the momenta only (the constant term belongs to the position part)."""
        n = self.dof
        return Polynomial(tuple((c, e) for c, e in self.terms if not any(e[:n]) and any(e[n:])), n)

    def position_part(self) -> "Polynomial":
        n = self.dof
        return Polynomial(tuple((c, e) for c, e in self.terms if not any(e[n:])), n)

    @cached_property
    def _tables(self):
        # coefficient and exponent arrays for value, gradient and Hessian
        m = 2 * self.dof
        c = np.array([t[0] for t in self.terms], dtype=float)
        e = np.array([t[1] for t in self.terms], dtype=int).reshape(len(self.terms), m)
        eye = np.eye(m, dtype=int)
        gc = c[None, :] * e.T                                   # (m, T)
        ge = np.maximum(e[None, :, :] - eye[:, None, :], 0)     # (m, T, m)
        hc = gc[:, None, :] * (e.T[None, :, :] - eye[:, :, None])
        he = np.maximum(ge[:, None] - eye[None, :, None, :], 0)  # (m, m, T, m)
        return c, e, gc, ge, hc, he

    @staticmethod
    def _monomials(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
        # prod_i x[..., i] ** exps[..., i] for every leading index of exps
        m = x.shape[-1]
        if x.size <= 4096:
            xb = x.reshape(x.shape[:-1] + (1,) * (exps.ndim - 1) + (m,))
            return np.prod(xb ** exps, axis=-1)
        top = int(exps.max()) if exps.size else 0
        cols = [x[..., i] for i in range(m)]
        pw = [[np.ones(x.shape[:-1])] + [None] * top for _ in range(m)]
        for i in range(m):
            for k in range(1, top + 1):
                pw[i][k] = pw[i][k - 1] * cols[i]
        lead = exps.shape[:-1]
        out = np.empty(x.shape[:-1] + lead)
        for idx in np.ndindex(*lead):
            mono = None
            for i, k in enumerate(exps[idx]):
                if k:
                    mono = pw[i][k] if mono is None else mono * pw[i][k]
            out[(Ellipsis,) + idx] = 1.0 if mono is None else mono
        return out

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        c, e = self._tables[:2]
        if not c.size:
            return np.zeros(x.shape[:-1])
        return self._monomials(x, e) @ c

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _, _, gc, ge = self._tables[:4]
        if not gc.size:
            return np.zeros(x.shape)
        return np.sum(self._monomials(x, ge) * gc, axis=-1)

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        hc, he = self._tables[4:]
        m = x.shape[-1]
        if not hc.size:
            return np.zeros(x.shape + (m,))
        return np.sum(self._monomials(x, he) * hc, axis=-1)

    def __call__(self, x):
        return self.value(x)


def _mono(dof: int, q: Sequence[int] = (), p: Sequence[int] = ()) -> tuple[int, ...]:
    e = [0] * (2 * dof)
    for i, k in enumerate(q):
        e[i] = k
    for i, k in enumerate(p):
        e[dof + i] = k
    return tuple(e)


def kinetic(dof: int = 1, mass: float = 1.0) -> Polynomial:
    d = {}
    for i in range(dof):
        pe = [0] * dof
        pe[i] = 2
        d[_mono(dof, p=pe)] = 0.5 / mass
    return Polynomial.from_dict(d, dof)


# ---------------------------------------------------------------------------
# named systems

def harmonic(omega: float = 1.0, mass: float = 1.0) -> Polynomial:
    return kinetic(1, mass) + Polynomial.from_dict({(2, 0): 0.5 * mass * omega**2})


def free_particle(mass: float = 1.0) -> Polynomial:
    return kinetic(1, mass)


def quartic(a: float = 1.0, b: float = 0.0) -> Polynomial:
    """``p^2/2 + b q^2/2 + a q^4/4``."""
    return kinetic(1) + Polynomial.from_dict({(2, 0): 0.5 * b, (4, 0): 0.25 * a})


def displaced_quartic(a: float = 1.0, d: float = 0.5) -> Polynomial:
    """``p^2/2 + a (q - d)^4 / 4``."""
    binom = [1, 4, 6, 4, 1]
    coeffs = {(k, 0): 0.25 * a * binom[k] * (-d) ** (4 - k) for k in range(5)}
    return kinetic(1) + Polynomial.from_dict(coeffs)


def double_well(a: float = 1.0, b: float = 1.0) -> Polynomial:
    """``p^2/2 - b q^2/2 + a q^4/4``."""
    return kinetic(1) + Polynomial.from_dict({(2, 0): -0.5 * b, (4, 0): 0.25 * a})


def coupled_quartic(a: float = 1.0, c: float = 0.1) -> Polynomial:
    """Two degrees of freedom, ``sum p_i^2/2 + a (q1^4 + q2^4)/4 + c q1^2 q2^2 / 2``."""
    d = {
        (4, 0, 0, 0): 0.25 * a,
        (0, 4, 0, 0): 0.25 * a,
        (2, 2, 0, 0): 0.5 * c,
    }
    return kinetic(2) + Polynomial.from_dict(d, 2)


def harmonic_product(omega1: float = 1.0, omega2: float = math.sqrt(2.0)) -> Polynomial:
    d = {(2, 0, 0, 0): 0.5 * omega1**2, (0, 2, 0, 0): 0.5 * omega2**2}
    return kinetic(2) + Polynomial.from_dict(d, 2)


def momentum_driver(c: float = 1.0, axis: int = 0, dof: int = 1) -> Polynomial:
    pe = [0] * dof
    pe[axis] = 1
    return Polynomial.from_dict({_mono(dof, p=pe): c}, dof)


def position_driver(c: float = 1.0, axis: int = 0, dof: int = 1) -> Polynomial:
    qe = [0] * dof
    qe[axis] = 1
    return Polynomial.from_dict({_mono(dof, q=qe): c}, dof)


SYSTEMS = {
    "harmonic": (harmonic, 1),
    "free": (free_particle, 1),
    "quartic": (quartic, 1),
    "displaced_quartic": (displaced_quartic, 1),
    "double_well": (double_well, 1),
    "coupled_quartic": (coupled_quartic, 2),
    "harmonic_product": (harmonic_product, 2),
}

DRIVERS = ("momentum", "position", "self")


@dataclass(frozen=True)
class SystemSpec:
    """Intrinsic Hamiltonian, driving Hamiltonian and hbar."""

    hamiltonian: Polynomial
    driver: Polynomial
    hbar: float
    dof: int = 1
    name: str = "custom"

    def __post_init__(self):
        if self.hamiltonian.dof != self.dof or self.driver.dof != self.dof:
            raise ValueError("hamiltonian/driver dof mismatch")

    def with_hbar(self, hbar: float) -> "SystemSpec":
        return SystemSpec(self.hamiltonian, self.driver, hbar, self.dof, self.name)


def make_system(name: str, hbar: float, driver: str = "momentum",
                driver_coefficient: float = 1.0, driver_axis: int = 0,
                **coefficients) -> SystemSpec:
    """Build a :class:`SystemSpec` from one of the named model systems."""
    try:
        factory, dof = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    ham = factory(**coefficients)
    if driver == "momentum":
        drv = momentum_driver(driver_coefficient, driver_axis, dof)
    elif driver == "position":
        drv = position_driver(driver_coefficient, driver_axis, dof)
    elif driver == "self":
        drv = ham.scaled(driver_coefficient)
    else:
        raise ValueError(f"unknown driver {driver!r}; choose from {DRIVERS}")
    return SystemSpec(ham, drv, float(hbar), dof, name)


# ---------------------------------------------------------------------------
# phase points, windows, queries

@dataclass(frozen=True)
class PhasePoint:
    q: tuple[float, ...]
    p: tuple[float, ...]

    def __post_init__(self):
        if len(self.q) != len(self.p) or len(self.q) < 1:
            raise ValueError("q and p must have equal length >= 1")
        if not all(math.isfinite(v) for v in self.q + self.p):
            raise DomainError("phase point has non-finite components")

    @classmethod
    def from_array(cls, x) -> "PhasePoint":
        x = np.asarray(x, dtype=float).ravel()
        n = x.size // 2
        return cls(tuple(float(v) for v in x[:n]), tuple(float(v) for v in x[n:]))

    def to_array(self) -> np.ndarray:
        return np.array(self.q + self.p)

    @property
    def dof(self) -> int:
        return len(self.q)


@dataclass(frozen=True)
class SmoothingWindow:
    epsilon: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise DomainError("epsilon must be positive and finite")


@dataclass(frozen=True)
class TransitionQuery:
    E: float
    E_prime: float
    tau: float
    window: SmoothingWindow

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.E, self.E_prime, self.tau)):
            raise DomainError("query values must be finite")

    @property
    def epsilon(self) -> float:
        return self.window.epsilon

    def swapped(self) -> "TransitionQuery":
        """The query for ``P_{E'E}(-tau)``."""
        return TransitionQuery(self.E_prime, self.E, -self.tau, self.window)


def query(E: float, E_prime: float, tau: float, epsilon: float) -> TransitionQuery:
    return TransitionQuery(float(E), float(E_prime), float(tau), SmoothingWindow(float(epsilon)))


def lorentzian_delta(E, window: SmoothingWindow | float):
    """Lorentzian approximation of the delta function, ``eps / (pi (eps^2 + E^2))``."""
    eps = window.epsilon if isinstance(window, SmoothingWindow) else float(window)
    if not eps > 0:
        raise DomainError("epsilon must be positive")
    E = np.asarray(E, dtype=float)
    if not np.all(np.isfinite(E)):
        raise DomainError("energy argument must be finite")
    out = eps / (math.pi * (eps * eps + E * E))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    ok: bool
    failures: list[str] = field(default_factory=list)
    max_gradient_error: float = 0.0
    max_error_location: np.ndarray | None = None


def validate_system(spec: SystemSpec, box: float = 2.0, n_points: int = 100,
                    rtol: float = 1e-6, seed: int = 0) -> ValidationReport:
    """Check hbar, dof and analytic gradients against central differences."""
    failures = []
    if not spec.hbar > 0:
        failures.append("hbar must be positive")
    if spec.dof < 1:
        failures.append("dof must be at least 1")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-box, box, size=(n_points, 2 * spec.dof))
    worst, where = 0.0, None
    for label, fn in (("hamiltonian", spec.hamiltonian), ("driver", spec.driver)):
        g = np.asarray(fn.gradient(pts))
        fd = np.empty_like(g)
        for i in range(pts.shape[1]):
            h = 1e-5 * np.maximum(1.0, np.abs(pts[:, i]))
            xp, xm = pts.copy(), pts.copy()
            xp[:, i] += h
            xm[:, i] -= h
            fd[:, i] = (fn.value(xp) - fn.value(xm)) / (2 * h)
        scale = np.maximum(1.0, np.linalg.norm(fd, axis=1))
        err = np.linalg.norm(g - fd, axis=1) / scale
        k = int(np.argmax(err))
        if err[k] > worst:
            worst, where = float(err[k]), pts[k]
        if err[k] > rtol:
            failures.append(f"{label} gradient mismatch {err[k]:.3e} at {pts[k].tolist()}")
    return ValidationReport(not failures, failures, worst, where)
