import os
import pathlib

import numpy as np
import pytest

from dpgnn.graph_data import ToySpec, generate_toy_dataset, graph_from_edges, parse_tu_dataset

REPO = pathlib.Path(__file__).resolve().parents[1]
DATA_ROOT = pathlib.Path(os.environ.get("DPGNN_DATA", REPO / "data"))


def two_class_graph():
    """Six nodes, four of class 0 and two of class 1.

    Node 0 ("A") has one class-0 neighbour and two class-1 neighbours.
    """
    labels = [0, 0, 0, 0, 1, 1]
    edges = [(0, 1), (0, 4), (0, 5), (1, 2), (2, 3), (3, 4)]
    return graph_from_edges(labels, edges, graph_label=0, num_node_classes=2)


@pytest.fixture(scope="session")
def mutag():
    return parse_tu_dataset(DATA_ROOT, "MUTAG")


@pytest.fixture(scope="session")
def toy():
    return generate_toy_dataset(ToySpec(graphs_per_class=10), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record ``(name, passed, detail)`` for the end-of-run acceptance summary."""

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\nACCEPTANCE {line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
