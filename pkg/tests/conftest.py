import numpy as np
import pytest
import torch
from hypothesis import settings

from dstgcn.data import ring_graph
from dstgcn.graph import TrafficGraph, GraphKind, build_binary_adjacency
from dstgcn.model import ModelConfig

torch.set_num_threads(1)
settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def tiny_config():
    return ModelConfig(num_nodes=5, window=8, blocks=1, diffusion_steps=2, hidden=8, out_dim=8, gse_hidden=4)


@pytest.fixture
def ring5():
    return ring_graph(5)


@pytest.fixture
def chain5():
    edges = [(i, i + 1) for i in range(4)]
    return TrafficGraph([f"n{i}" for i in range(5)], build_binary_adjacency(edges, 5),
                        GraphKind.LINK_CONNECTIVITY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
