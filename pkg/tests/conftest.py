import numpy as np
import pytest

from tomo.fourier_slice import make_geometry
from tomo.normal_ops import build_btb


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def geom16():
    return make_geometry(16, 1, "digits6")


@pytest.fixture(scope="session")
def geom32():
    return make_geometry(32, 1, "digits6")


@pytest.fixture(scope="session")
def btb16(geom16):
    return build_btb(geom16)


@pytest.fixture(scope="session")
def btb32(geom32):
    return build_btb(geom32)
