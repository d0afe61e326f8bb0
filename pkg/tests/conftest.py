import numpy as np
import pytest

from hgrnet.data import SplitRole, generate_synthetic
from hgrnet.tensor import default_dtype, set_num_threads

# Smallest multiple of 4 the stream CNN accepts; keeps forward passes fast.
SMALL = 108


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def tiny_splits():
    """Eight train, four validation and four test samples over four classes at 108 x 108."""
    return generate_synthetic((8, 4, 4), num_classes=4, seed=11, image_size=SMALL)


@pytest.fixture
def tiny_train(tiny_splits):
    return tiny_splits[SplitRole.TRAIN]


@pytest.fixture
def tiny_validation(tiny_splits):
    return tiny_splits[SplitRole.VALIDATION]
