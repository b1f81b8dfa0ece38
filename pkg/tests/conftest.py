import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochnls import ModelParams, SpatialGrid, make_filter

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid():
    return SpatialGrid(1024, 20.0 * np.pi)


@pytest.fixture(scope="session")
def small_grid():
    return SpatialGrid(256, 30.0)


@pytest.fixture(scope="session")
def cubic():
    return ModelParams(1.0, 1)


@pytest.fixture(scope="session")
def phi(grid):
    return make_filter("near_identity", grid, k_max=8.0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
