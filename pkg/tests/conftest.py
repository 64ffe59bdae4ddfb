import numpy as np
import pytest

from config import ModelConfig, model_preset
from skeleton import build_topology, decompose_adjacency, make_topology


@pytest.fixture(scope="session")
def topo():
    return build_topology("h36m17")


@pytest.fixture(scope="session")
def adjacency(topo):
    return decompose_adjacency(topo)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return model_preset("tiny")


@pytest.fixture
def two_joint_topo():
    return make_topology(["root", "tip"], [None, 0], 0, [])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
