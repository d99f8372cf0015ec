import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from obsbench.model import CellParams, OcvCurve
from obsbench.profiles import DEFAULT_CELL, DEFAULT_OCV

settings.register_profile(
    "obsbench", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("obsbench")


@pytest.fixture
def cell():
    return DEFAULT_CELL


@pytest.fixture
def ocv():
    return DEFAULT_OCV


@pytest.fixture
def small_cell():
    """Hand-sized cell with distinct time constants (1 s and 2 s)."""
    return CellParams(r_ohm=0.01, r_a=1.0, c_a=1.0, r_b=2.0, c_b=1.0, capacity_c=3600.0, eta=1.0)


def affine_ocv(slope=0.7, v0=3.2):
    return OcvCurve((0.0, 1.0), (v0, v0 + slope))


def random_ocv(rng, n=101):
    soc = np.concatenate(([0.0], np.sort(rng.uniform(0.0, 1.0, n - 2)), [1.0]))
    soc = np.unique(soc)
    ocv = 3.0 + np.cumsum(np.concatenate(([0.0], rng.uniform(0.001, 0.05, soc.size - 1))))
    return OcvCurve(tuple(soc), tuple(ocv))
