import numpy as np
import pytest

from fedbilevel.problems import QuadQuad

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def quad():
    return QuadQuad.random(10, 10, mu=1.0, L1=2.0, noise_std=0.0, seed=0)


@pytest.fixture(scope="session")
def small_quad():
    return QuadQuad.random(3, 4, mu=0.5, L1=3.0, noise_std=0.2, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
