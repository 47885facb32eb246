import numpy as np
import pytest

from boundwatch.benchmarks import BenchmarkSpec, NavParams, QuadraticParams


@pytest.fixture
def quad_spec():
    return BenchmarkSpec.smooth_quadratic()


@pytest.fixture
def nav_spec():
    return BenchmarkSpec.primitive_nav()


@pytest.fixture
def quad_params():
    return QuadraticParams()


@pytest.fixture
def nav_params():
    return NavParams()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
