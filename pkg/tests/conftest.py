import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sobolev_diffeo.rng import stream
from sobolev_diffeo.spectral import GridSpec, MetricSpec

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=40,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")

TWO_PI = 2 * np.pi


@pytest.fixture
def grid1():
    return GridSpec.uniform(64)


@pytest.fixture
def grid2():
    return GridSpec.uniform(32, dim=2)


@pytest.fixture
def metric1(grid1):
    return MetricSpec(grid1, 2.0)


@pytest.fixture
def metric2(grid2):
    return MetricSpec(grid2, 2.5)


@pytest.fixture
def rng(request):
    return stream(7, request.node.name)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
