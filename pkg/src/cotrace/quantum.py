"""Exact quantum pathways: grid eigensolver, driving unitary, transition
matrix, the eigen-sum density and the double Fourier transform of the
compound-propagator trace."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .core import Polynomial, SystemSpec, TransitionQuery, lorentzian_delta


class BoxError(ValueError):
    """Eigenfunctions carry non-negligible weight at the grid boundary."""


class CoverageError(ValueError):
    """Requested energy window is not covered by converged levels."""


class TruncationError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Periodic position grid, ``points`` per degree of freedom on ``box``."""

    points: int = 512
    box: tuple[float, float] = (-10.0, 10.0)

    @property
    def dx(self) -> float:
        return (self.box[1] - self.box[0]) / self.points

    def coordinates(self) -> np.ndarray:
        return self.box[0] + self.dx * np.arange(self.points)

    def momenta(self, hbar: float) -> np.ndarray:
        return hbar * 2 * np.pi * np.fft.fftfreq(self.points, self.dx)

    def doubled(self) -> "Grid":
        return Grid(2 * self.points, self.box)


def _mesh(grid: Grid, dof: int, values: np.ndarray) -> np.ndarray:
    axes = np.meshgrid(*([values] * dof), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=-1)


def _momentum_symbol(poly: Polynomial, grid: Grid, hbar: float, dof: int) -> np.ndarray:
    """Values of the momentum part on the FFT frequency mesh (Nyquist odd part removed)."""
    p = grid.momenta(hbar)
    P = _mesh(grid, dof, p)
    x = np.concatenate([np.zeros_like(P), P], axis=1)
    mp = poly.momentum_part()
    val = mp.value(x)
    if grid.points % 2 == 0:
        # odd powers have no consistent value at the Nyquist frequency
        flip = -P
        odd = 0.5 * (val - mp.value(np.concatenate([np.zeros_like(P), flip], axis=1)))
        nyq = np.any(np.isclose(np.abs(P), np.abs(p[grid.points // 2])), axis=1)
        val = np.where(nyq, val - odd, val)
    return val


def _position_values(poly: Polynomial, grid: Grid, dof: int) -> np.ndarray:
    Q = _mesh(grid, dof, grid.coordinates())
    x = np.concatenate([Q, np.zeros_like(Q)], axis=1)
    return poly.position_part().value(x)


def _fourier_matrix(grid: Grid, dof: int) -> np.ndarray:
    n = grid.points
    F1 = np.fft.fft(np.eye(n), axis=0, norm="ortho")
    F = F1
    for _ in range(dof - 1):
        F = np.kron(F, F1)
    return F


def operator_matrix(poly: Polynomial, grid: Grid, hbar: float, dof: int = 1) -> np.ndarray:
    """Grid matrix of a separable polynomial ``T(p) + V(q)``."""
    if not poly.is_separable():
        raise NotImplementedError("only separable T(p) + V(q) operators are supported on the grid")
    F = _fourier_matrix(grid, dof)
    T = _momentum_symbol(poly, grid, hbar, dof)
    mat = F.conj().T @ (T[:, None] * F)
    mat = mat + np.diag(_position_values(poly, grid, dof))
    if np.max(np.abs(mat.imag)) < 1e-14 * max(1.0, np.max(np.abs(mat.real))):
        mat = mat.real
    return 0.5 * (mat + mat.conj().T)


def _boundary_mass(vectors: np.ndarray, grid: Grid, dof: int, frac: float = 0.05) -> np.ndarray:
    n = grid.points
    w = max(1, int(round(frac * n)))
    edge1 = np.zeros(n, dtype=bool)
    edge1[:w] = True
    edge1[-w:] = True
    if dof == 1:
        edge = edge1
    else:
        grids = np.meshgrid(*([edge1] * dof), indexing="ij")
        edge = np.logical_or.reduce([g.ravel() for g in grids])
    return np.sum(np.abs(vectors[edge]) ** 2, axis=0)


@dataclass
class Spectrum:
    grid: Grid
    hbar: float
    dof: int
    energies: np.ndarray
    vectors: np.ndarray                 # columns orthonormal in the discrete l2 sense
    convergence: np.ndarray             # |E_k(n) - E_k(2n)|
    boundary_mass: np.ndarray
    conv_tol: float = 1e-8
    mass_tol: float = 1e-10
    key: str = ""

    @property
    def n_usable(self) -> int:
        ok = (self.convergence < self.conv_tol) & (self.boundary_mass < self.mass_tol)
        bad = np.nonzero(~ok)[0]
        return int(bad[0]) if bad.size else len(self.energies)

    @property
    def usable_energies(self) -> np.ndarray:
        return self.energies[: self.n_usable]

    @property
    def usable_vectors(self) -> np.ndarray:
        return self.vectors[:, : self.n_usable]

    @property
    def top(self) -> float:
        k = self.n_usable
        return float(self.energies[k - 1]) if k else -math.inf


def _solve(spec: SystemSpec, grid: Grid, n_levels: int | None):
    H = operator_matrix(spec.hamiltonian, grid, spec.hbar, spec.dof)
    size = H.shape[0]
    k = size if n_levels is None else min(n_levels, size)
    w, v = sla.eigh(H, subset_by_index=[0, k - 1])
    return w, v


def spectrum_key(spec: SystemSpec, grid: Grid, n_levels: int | None) -> str:
    blob = json.dumps({
        "H": [[c, list(e)] for c, e in spec.hamiltonian.terms],
        "hbar": spec.hbar, "dof": spec.dof,
        "grid": [grid.points, list(grid.box)], "levels": n_levels,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def eigensolve(spec: SystemSpec, grid: Grid = Grid(), n_levels: int | None = None,
               check: bool = True, conv_tol: float = 1e-8, mass_tol: float = 1e-10,
               cache_dir: str | Path | None = None) -> Spectrum:
    """Diagonalize ``H`` on the grid; convergence is judged by grid doubling."""
    key = spectrum_key(spec, grid, n_levels)
    if cache_dir is not None:
        cached = load_spectrum(Path(cache_dir) / f"spectrum-{key}.npz", expect_key=key)
        if cached is not None:
            return cached
    w, v = _solve(spec, grid, n_levels)
    mass = _boundary_mass(v, grid, spec.dof)
    if mass[0] > mass_tol:
        raise BoxError(f"ground state has boundary mass {mass[0]:.2e}; enlarge the box")
    if check:
        w2, _ = _solve(spec, grid.doubled(), len(w))
        conv = np.abs(w - w2[: len(w)])
    else:
        conv = np.zeros_like(w)
    s = Spectrum(grid, spec.hbar, spec.dof, w, v, conv, mass, conv_tol, mass_tol, key)
    if cache_dir is not None:
        save_spectrum(s, Path(cache_dir) / f"spectrum-{key}.npz")
    return s


# ---------------------------------------------------------------------------
# spectrum cache file

CACHE_VERSION = 1


def save_spectrum(s: Spectrum, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"format": "cotrace-spectrum", "version": CACHE_VERSION, "key": s.key,
                         "grid": [s.grid.points, list(s.grid.box)], "hbar": s.hbar, "dof": s.dof,
                         "conv_tol": s.conv_tol, "mass_tol": s.mass_tol})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), energies=s.energies, vectors=s.vectors,
                 convergence=s.convergence, boundary_mass=s.boundary_mass)


def load_spectrum(path: Path, expect_key: str | None = None) -> Spectrum | None:
    if not Path(path).exists():
        return None
    with np.load(path) as z:
        h = json.loads(str(z["header"]))
        if h.get("format") != "cotrace-spectrum" or h.get("version") != CACHE_VERSION:
            return None
        if expect_key is not None and h["key"] != expect_key:
            return None
        return Spectrum(Grid(h["grid"][0], tuple(h["grid"][1])), h["hbar"], h["dof"],
                        z["energies"], z["vectors"], z["convergence"], z["boundary_mass"],
                        h["conv_tol"], h["mass_tol"], h["key"])


# ---------------------------------------------------------------------------
# driving

@dataclass
class DriveOperator:
    """``exp(-i tau L / hbar)`` through the eigen-decomposition of ``L`` on the grid."""

    eigvals: np.ndarray
    eigvecs: np.ndarray | None     # None means the DFT basis
    hbar: float
    grid: Grid
    dof: int

    def _to_eig(self, psi):
        if self.eigvecs is None:
            return _fft_nd(psi, self.grid, self.dof)
        return self.eigvecs.conj().T @ psi

    def _from_eig(self, c):
        if self.eigvecs is None:
            return _ifft_nd(c, self.grid, self.dof)
        return self.eigvecs @ c

    def phases(self, tau: float) -> np.ndarray:
        return np.exp(-1j * tau * self.eigvals / self.hbar)

    def apply(self, psi, tau: float) -> np.ndarray:
        psi = np.asarray(psi)
        c = self._to_eig(psi.reshape(psi.shape[0], -1))
        out = self._from_eig(self.phases(tau)[:, None] * c)
        return out.reshape(psi.shape)

    def matrix(self, tau: float) -> np.ndarray:
        n = len(self.eigvals)
        return self.apply(np.eye(n, dtype=complex), tau)


def _fft_nd(psi, grid, dof):
    n = grid.points
    k = psi.shape[1]
    a = psi.reshape((n,) * dof + (k,))
    return np.fft.fftn(a, axes=tuple(range(dof)), norm="ortho").reshape(n ** dof, k)


def _ifft_nd(c, grid, dof):
    n = grid.points
    k = c.shape[1]
    a = c.reshape((n,) * dof + (k,))
    return np.fft.ifftn(a, axes=tuple(range(dof)), norm="ortho").reshape(n ** dof, k)


def drive_operator(spec: SystemSpec, grid: Grid) -> DriveOperator:
    drv = spec.driver
    n = spec.dof
    if drv.is_separable() and not drv.position_part().terms:
        # a pure momentum function is diagonal in the discrete Fourier basis
        return DriveOperator(_momentum_symbol(drv, grid, spec.hbar, n), None, spec.hbar, grid, n)
    if drv.is_separable() and not drv.momentum_part().terms:
        vals = _position_values(drv, grid, n)
        return DriveOperator(vals, np.eye(len(vals)), spec.hbar, grid, n)
    w, v = np.linalg.eigh(operator_matrix(drv, grid, spec.hbar, n))
    return DriveOperator(w, v, spec.hbar, grid, n)


def drive_unitary(spec: SystemSpec, tau: float, grid: Grid) -> np.ndarray:
    """Dense matrix of ``U(tau) = exp(-i tau L / hbar)`` on the grid."""
    return drive_operator(spec, grid).matrix(tau)


# ---------------------------------------------------------------------------
# transition matrix and densities

@dataclass
class TransitionMatrix:
    tau: float
    amplitudes: np.ndarray       # <k|U|l>
    probabilities: np.ndarray    # |<k|U|l>|^2
    leakage_rows: np.ndarray
    leakage_cols: np.ndarray

    @property
    def size(self) -> int:
        return self.probabilities.shape[0]


class TransitionFactory:
    """Caches overlaps of the usable eigenvectors with the driver eigenbasis."""

    def __init__(self, spectrum: Spectrum, drive: DriveOperator):
        self.spectrum = spectrum
        self.drive = drive
        self.coeffs = drive._to_eig(spectrum.usable_vectors.astype(complex))

    def __call__(self, tau: float) -> TransitionMatrix:
        C = self.coeffs
        amp = C.conj().T @ (self.drive.phases(tau)[:, None] * C)
        P = np.abs(amp) ** 2
        return TransitionMatrix(tau, amp, P, 1.0 - P.sum(axis=1), 1.0 - P.sum(axis=0))


def transition_matrix(spectrum: Spectrum, U, tau: float = float("nan")) -> TransitionMatrix:
    """``|<k|U|l>|^2`` over the usable levels; ``U`` is a matrix or a :class:`DriveOperator`."""
    if isinstance(U, DriveOperator):
        return TransitionFactory(spectrum, U)(tau)
    V = spectrum.usable_vectors
    amp = V.conj().T @ (np.asarray(U) @ V)
    P = np.abs(amp) ** 2
    return TransitionMatrix(tau, amp, P, 1.0 - P.sum(axis=1), 1.0 - P.sum(axis=0))


@dataclass
class DensityResult:
    query: TransitionQuery
    value: float
    pathway: str
    terms: list = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    background: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_warnings(self) -> int:
        return len(self.diagnostics)


def _check_coverage(query: TransitionQuery, spectrum: Spectrum, width: float = 20.0):
    top = max(query.E, query.E_prime) + width * query.epsilon
    if spectrum.n_usable == 0 or spectrum.top < top:
        raise CoverageError(f"converged levels reach {spectrum.top:.4g}; need {top:.4g}")


def eigen_density(query: TransitionQuery, spectrum: Spectrum, T: TransitionMatrix,
                  coverage: float = 20.0) -> DensityResult:
    """``sum_kl d_eps(E - E_k) d_eps(E' - E_l) |<k|U|l>|^2``."""
    _check_coverage(query, spectrum, coverage)
    Ek = spectrum.usable_energies[: T.size]
    a = lorentzian_delta(query.E - Ek, query.window)
    b = lorentzian_delta(query.E_prime - Ek, query.window)
    val = float(a @ T.probabilities @ b)
    tail = query.epsilon / (math.pi * (spectrum.top - max(query.E, query.E_prime)))
    return DensityResult(query, val, "eigen_sum", extra={"levels": int(T.size), "tail_weight": tail})


def fourier_kernel(omega: np.ndarray, epsilon: float, hbar: float, T_max: float,
                   n_steps: int, order: int = 8) -> np.ndarray:
    """``int_{-T}^{T} dt/(2 pi hbar) exp(i omega t/hbar - eps |t|/hbar)`` by Gauss-Legendre panels.

    The damping is even in ``t``, so the integral is ``2 int_0^T cos(omega t/hbar) ...``.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, T_max, n_steps + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    damp = 2.0 * wt * np.exp(-epsilon * t / hbar) / (2 * math.pi * hbar)
    omega = np.asarray(omega, dtype=float)
    out = np.empty(len(omega))
    for i in range(0, len(omega), 64):
        out[i:i + 64] = np.cos(np.outer(omega[i:i + 64], t / hbar)) @ damp
    return out


def analytic_kernel(omega, epsilon: float) -> np.ndarray:
    """Closed form of the time integral in :func:`fourier_kernel` for ``T_max -> inf``.

    Each half line gives ``hbar / (eps -+ i omega)``; the sum is kept complex.
    """
    om = np.asarray(omega, dtype=float).astype(complex)
    return (1.0 / (epsilon - 1j * om) + 1.0 / (epsilon + 1j * om)) / (2 * math.pi)


def default_T_max(epsilon: float, hbar: float, tail_tol: float = 1e-8) -> float:
    return hbar * math.log(1.0 / tail_tol) / epsilon


def double_ft_density(query: TransitionQuery, spectrum: Spectrum, T: TransitionMatrix,
                      method: str = "quadrature", T_max: float | None = None,
                      n_steps: int | None = None, coverage: float = 20.0) -> DensityResult:
    """Double Fourier transform of the damped compound trace.

    ``method="analytic"`` uses the closed-form transform of the damped
    exponentials; ``method="quadrature"`` discretizes both time integrals.
    """
    _check_coverage(query, spectrum, coverage)
    hbar, eps = spectrum.hbar, query.epsilon
    Ek = spectrum.usable_energies[: T.size]
    if method == "analytic":
        z = analytic_kernel(query.E - Ek, eps) @ T.probabilities @ analytic_kernel(query.E_prime - Ek, eps)
        return DensityResult(query, float(z.real), "double_ft",
                             extra={"method": "analytic", "imag": float(z.imag)})
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    T_max = default_T_max(eps, hbar) if T_max is None else T_max
    span = float(np.max(np.abs(np.concatenate([query.E - Ek, query.E_prime - Ek]))))
    if n_steps is None:
        n_steps = max(64, int(math.ceil(span * T_max / hbar / 3.0)))
    a = fourier_kernel(query.E - Ek, eps, hbar, T_max, n_steps)
    b = fourier_kernel(query.E_prime - Ek, eps, hbar, T_max, n_steps)
    z = a @ T.probabilities @ b
    ref = lorentzian_delta(query.E - Ek, query.window) @ T.probabilities @ \
        lorentzian_delta(query.E_prime - Ek, query.window)
    rel = abs(z - ref) / max(abs(ref), 1e-300)
    return DensityResult(query, float(z), "double_ft",
                         extra={"method": "quadrature", "T_max": T_max, "n_steps": n_steps,
                                "analytic_mismatch": float(rel)})


def compound_trace(t, t_prime, spectrum: Spectrum, T: TransitionMatrix,
                   tol: float | None = None) -> tuple[complex, float]:
    """``tr[V(t) U V(t') U^+]`` over the usable levels and a truncation bound.

    Complex times with negative imaginary parts regularize the sum.
    """
    hbar = spectrum.hbar
    Ek = spectrum.usable_energies[: T.size]
    a = np.exp(-1j * complex(t) * Ek / hbar)
    b = np.exp(-1j * complex(t_prime) * Ek / hbar)
    val = complex(a @ T.probabilities @ b)
    # geometric estimate of the omitted levels from the decay at the edge
    ea, eb = np.abs(a), np.abs(b)
    bound = 0.0
    for e in (ea, eb):
        if len(e) >= 2 and e[-1] < e[-2]:
            r = e[-1] / e[-2]
            bound += float(e[-1] * (ea.max() * eb.max()) / (1 - r))
        else:
            bound = math.inf
    if tol is not None and bound > tol:
        raise TruncationError(f"trace truncation bound {bound:.2e} exceeds {tol:.2e}")
    return val, bound
