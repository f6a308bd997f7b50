"""Energy transition densities of driven Hamiltonian systems.

Three pathways are provided: the exact eigen-sum, the double Fourier
transform of the compound-propagator trace, and the semiclassical sum over
closed compound orbits plus the classical background.
"""

__version__ = "0.1.0"

from .core import (PhasePoint, SmoothingWindow, SystemSpec, TransitionQuery, lorentzian_delta,
                   make_system, query, validate_system)
from .dynamics import flow, tangent_flow, driven_hamiltonian, trace_contour
from .orbits import (CompoundOrbit, compound_orbits, shell_intersections, segment_times,
                     symplectic_area, jacobian_times_energies, caustic_counter,
                     product_section_fixed_point)
from .quantum import (Grid, Spectrum, eigensolve, drive_unitary, transition_matrix, eigen_density,
                      compound_trace, double_ft_density, DensityResult)
from .semiclassics import SCTerm, sc_density, classical_background, sigma_calibration

__all__ = [
    "PhasePoint", "SmoothingWindow", "SystemSpec", "TransitionQuery", "lorentzian_delta",
    "make_system", "query", "validate_system", "flow", "tangent_flow", "driven_hamiltonian",
    "trace_contour", "CompoundOrbit", "compound_orbits", "shell_intersections", "segment_times",
    "symplectic_area", "jacobian_times_energies", "caustic_counter", "product_section_fixed_point",
    "Grid", "Spectrum", "eigensolve", "drive_unitary", "transition_matrix", "eigen_density",
    "compound_trace", "double_ft_density", "DensityResult", "SCTerm", "sc_density",
    "classical_background", "sigma_calibration",
]
