import numpy as np
import pytest

from moodkit.synthdata import generate_phantom


@pytest.fixture(scope="session")
def phantom32():
    return generate_phantom(3, 32)


@pytest.fixture(scope="session")
def phantom64():
    return generate_phantom(11, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
