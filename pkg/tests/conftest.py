import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "mlcsc",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("mlcsc")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
