import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from optreelab.data import make_triples
from optreelab.funcimg import build_meshgrid
from optreelab.nets import NetConfig
from optreelab.teacher import CachedTeacher, HashTeacher
from optreelab.tree import GenConfig
from optreelab.vocab import OperatorVocab

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def vocab():
    return OperatorVocab(1)


@pytest.fixture(scope="session")
def grid():
    return build_meshgrid()


@pytest.fixture(scope="session")
def small_triples(grid):
    return make_triples(GenConfig(node_range=(3, 7)), grid, 24, 1, seed=11)


@pytest.fixture(scope="session")
def teacher():
    return CachedTeacher(HashTeacher(64, 0))


@pytest.fixture
def tiny_net():
    return NetConfig(d_f=16, heads=2, layers=1, embedder_hidden=32)
