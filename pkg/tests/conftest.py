import numpy as np
import pytest

from imta.model import default_model


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
