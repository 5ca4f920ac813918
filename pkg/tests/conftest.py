import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stratlie import builtin_group

settings.register_profile("stratlie", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stratlie")

BUILTIN_SPECS = [
    ("heisenberg", 1), ("heisenberg", 2), ("heisenberg", 3),
    ("n32_glued", 1), ("n32_glued", 2), ("n32_glued", 3),
    ("heisenberg_reiter", 1, 2), ("heisenberg_reiter", 2, 2), ("heisenberg_reiter", 1, 3),
    ("heisenberg_reiter", 2, 3), ("heisenberg_reiter", 3, 3),
]


@pytest.fixture(scope="session")
def h1():
    return builtin_group("heisenberg", 1)


@pytest.fixture(scope="session")
def hr12():
    return builtin_group("heisenberg_reiter", 1, 2)


@pytest.fixture(scope="session")
def n32():
    return builtin_group("n32_glued", 1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
