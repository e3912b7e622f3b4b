import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sgelab.envs import CombinationLock, FeedbackRepair, NoisyTap
from sgelab.policy import PolicyConfig, build_base_policy

settings.register_profile("sgelab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sgelab")


@pytest.fixture
def tiny_lock():
    """Two steps, three strategies, two details: small enough to enumerate."""
    return CombinationLock(horizon=2, n_strategies=3, n_details=2, n_train=4, n_test=2)


@pytest.fixture
def small_lock():
    return CombinationLock(horizon=3, n_strategies=4, n_details=4, n_train=6, n_test=3)


@pytest.fixture
def lock():
    return CombinationLock()


@pytest.fixture
def tap():
    return NoisyTap()


@pytest.fixture
def repair():
    return FeedbackRepair()


@pytest.fixture
def tiny_policy(tiny_lock):
    return build_base_policy(tiny_lock, PolicyConfig(beta=1.0))


@pytest.fixture
def hidden_policy(tiny_lock):
    """Base policy with a tanh residual branch, perturbed so every weight is nonzero."""
    policy = build_base_policy(tiny_lock, PolicyConfig(beta=1.0, hidden=5, init_scale=0.3))
    return policy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
