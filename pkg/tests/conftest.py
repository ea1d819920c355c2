import numpy as np
import pytest

from gazefuse import tensor as T
from gazefuse.data import generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.get_tape().reset()
    yield
    T.get_tape().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds16")
    return generate_synthetic_dataset(root, 16, seed=5, split="train")


@pytest.fixture(scope="session")
def test_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds40")
    return generate_synthetic_dataset(root, 40, seed=9, split="test")
