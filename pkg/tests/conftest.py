import numpy as np
import pytest

from cotrace.core import make_system, query
from cotrace.orbits import compound_orbits
from cotrace.quantum import Grid, TransitionFactory, drive_operator, eigensolve


@pytest.fixture(scope="session")
def ho():
    return make_system("harmonic", hbar=0.05)


@pytest.fixture(scope="session")
def quartic():
    return make_system("quartic", hbar=0.02)


@pytest.fixture(scope="session")
def ho_lens_catalogue(ho):
    return compound_orbits(query(0.5, 0.5, 1.0, 0.05), ho, j_max=1)


@pytest.fixture(scope="session")
def ho_unit():
    """Oscillator at hbar = 1 with its spectrum and transition factory."""
    spec = make_system("harmonic", hbar=1.0)
    s = eigensolve(spec, Grid(256, (-12.0, 12.0)), n_levels=40)
    return spec, s, TransitionFactory(s, drive_operator(spec, s.grid))


@pytest.fixture(scope="session")
def ho_small():
    """Oscillator at hbar = 0.1 resolved well above E = 1."""
    spec = make_system("harmonic", hbar=0.1)
    s = eigensolve(spec, Grid(512, (-10.0, 10.0)), n_levels=120)
    return spec, s, TransitionFactory(s, drive_operator(spec, s.grid))


def lens(catalogue):
    """The positive-time lens orbit of the oscillator query."""
    best = [o for o in catalogue if o.j == 0 and o.j_prime == 0 and o.t > 0 and o.t_prime > 0
            and o.t < np.pi]
    assert len(best) == 1
    return best[0]


# one PASS/FAIL line per acceptance criterion, printed after the test session
_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
