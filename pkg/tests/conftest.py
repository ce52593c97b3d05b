import numpy as np
import pytest

from esbn.edges import EdgeOperator
from esbn.source_space import build_grid_source_space, build_head_model, hemisphere_sensors


@pytest.fixture(scope="session")
def small_head():
    """5 x 5 x 5-ish sphere (radius 20 mm, 10 mm spacing) with 16 sensors."""
    space = build_grid_source_space(20.0, 10.0)
    space, lf = build_head_model(space, hemisphere_sensors(16, 100.0))
    return space, lf


@pytest.fixture(scope="session")
def small_edge(small_head):
    return EdgeOperator.from_space(small_head[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
