import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pagnn.graph import Graph

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow],
                          derandomize=True)
settings.load_profile("repo")

ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[k])


@pytest.fixture
def toy_graph() -> Graph:
    """6 nodes, 8 edges, 2 classes."""
    rng = np.random.default_rng(11)
    edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5), (1, 5)]
    return Graph(6, rng.normal(size=(6, 3)), np.array(edges), np.array([0, 0, 0, 1, 1, 1]), 2)
