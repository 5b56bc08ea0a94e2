import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running statistical or acceptance test"
    )


@pytest.fixture(autouse=True)
def _seed_guard():
    # tests must not depend on the global numpy RNG state
    state = np.random.get_state()
    yield
    np.random.set_state(state)
