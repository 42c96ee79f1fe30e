import numpy as np
import pytest

from noiseprompt.schedule import NoiseSchedule
from noiseprompt.testbed import default_testbed, standard_normal_testbed


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def tb(schedule):
    """Default two-class 8x8 testbed shared by read-only tests."""
    return default_testbed(schedule=schedule)


@pytest.fixture(scope="session")
def std_tb(schedule):
    """Single standard-normal component: eps*(x, t) = sigma_t x exactly."""
    return standard_normal_testbed(schedule=schedule)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
