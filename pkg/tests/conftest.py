import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ref_triangle():
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
