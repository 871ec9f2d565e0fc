import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metaclr.grid import build_ieee13_analog, build_ieee123_analog
from metaclr.scenarios import make_task_family

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def ieee13():
    return build_ieee13_analog()


@pytest.fixture(scope="session")
def ieee123():
    return build_ieee123_analog()


@pytest.fixture(scope="session")
def small_tasks(ieee13):
    return make_task_family(ieee13, 4, horizon=12, xi=0.1, seed=7)


@pytest.fixture(scope="session")
def small_task(small_tasks):
    return small_tasks[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
