import numpy as np
import pytest

from horolab import presets
from horolab import quotient as qt


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def modular():
    return qt.ModularLattice()


@pytest.fixture(scope="session")
def hilbert():
    return qt.HilbertLattice(2)


@pytest.fixture(scope="session")
def generic_point():
    return presets.point_preset("generic1")


@pytest.fixture(scope="session")
def test_bump(modular):
    return presets.bump_preset(modular)
