import numpy as np
import pytest

from mpt.worldgen import Costmap


@pytest.fixture
def empty_map():
    return Costmap(np.zeros((240, 240), dtype=bool), 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
