import numpy as np
import pytest

from hyperns.model import Model


@pytest.fixture(scope="session")
def burgers4():
    return Model.build(1, 4, 1.0, 1.0, 0.375, 1.0)


@pytest.fixture(scope="session")
def burgers8():
    return Model.build(1, 8, 1.0, 1.0, 0.5, 1.0)


@pytest.fixture(scope="session")
def ns2():
    return Model.build(2, 4, 1.0, 2.0, 0.75, 1.0)


@pytest.fixture(scope="session")
def ns2_small():
    return Model.build(2, 2, 1.0, 2.0, 0.75, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
