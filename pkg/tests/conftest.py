import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RUNS = os.environ.get("RAEPINN_RUNS", os.path.join(REPO, "runs"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(arch, rng, scale=2.0):
    return rng.uniform(-scale, scale, arch.n_params)
