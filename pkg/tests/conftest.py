import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


class Demo:
    """Minimal demonstration container for tests that bypass the demo module."""

    def __init__(self, states, actions):
        self.states = np.asarray(states, dtype=np.float64)
        self.actions = np.asarray(actions)

    def __len__(self):
        return len(self.states)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
