import numpy as np
import pytest

from debriscat.network import load_network


@pytest.fixture(scope="session")
def network():
    return load_network()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
