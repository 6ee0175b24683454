import numpy as np
import pytest

from dosegan.dosesim import PhantomSpec, generate_dataset
from dosegan.nets import NetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    """A few volumes per split; enough for one-epoch training runs."""
    return generate_dataset(PhantomSpec(), seed=5, split_plan={"train": 4, "val": 2, "test": 2})


@pytest.fixture
def small_net():
    return NetConfig(base_channels=2, refiner_channels=2, class_hidden=8, feature_channels=(2, 2, 2))
