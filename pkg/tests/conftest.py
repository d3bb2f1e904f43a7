import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochns.noise import KirchhoffNoise, TransportNoiseBasis
from stochns.spectral import Truncation, random_field

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# constants fitted at n_max = 2 by the shipped certification run
DELTA1, DELTA2 = 1.57e-5, 3.43e-4


@pytest.fixture(scope="session")
def t2():
    return Truncation(2)


@pytest.fixture(scope="session")
def basis():
    return TransportNoiseBasis.from_cosines()


@pytest.fixture(scope="session")
def noise(basis):
    from stochns.noise import kappa_from_deltas

    k1, k2 = kappa_from_deltas(basis, DELTA1, DELTA2)
    return KirchhoffNoise.auto(k1, k2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def field(trunc, norm=1.0, seed=0, s=0.5, decay=1.5):
    return random_field(trunc, s, norm, np.random.default_rng(seed), decay=decay)


def grid_oracle(u, v, n_grid):
    """(u . grad) v on a uniform grid, transformed back and cut to the cube, unprojected."""
    t = u.trunc
    k = t.wavevectors
    idx = tuple((k % n_grid).T)

    def to_phys(coeffs):
        spec = np.zeros((n_grid,) * 3, dtype=complex)
        spec[idx] = coeffs
        return np.fft.ifftn(spec).real * n_grid ** 3

    uf, vf = u.full(), v.full()
    U = [to_phys(uf[:, j]) for j in range(3)]
    out = np.zeros((t.mode_count, 3), dtype=complex)
    for i in range(3):
        prod = sum(U[j] * to_phys(1j * k[:, j] * vf[:, i]) for j in range(3))
        out[:, i] = np.fft.fftn(prod)[idx] / n_grid ** 3
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines.items()):
            terminalreporter.write_line(line)
