import numpy as np
import pytest

from dualist import quantum
from dualist.quantum import LevelSelection, ModelSpec


def box(*levels, length=1.0, coefficients=None):
    coefficients = coefficients or [(1.0,)] * len(levels)
    sel = [LevelSelection(n, c) for n, c in zip(levels, coefficients)]
    return quantum.build_model(ModelSpec("box", sel, length=length))


@pytest.fixture(scope="session")
def ground():
    return box(1)


@pytest.fixture(scope="session")
def two_level():
    return box(1, 2)


@pytest.fixture(scope="session")
def three_level():
    return box(1, 2, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (len(s.split(":")[0]), s)):
            terminalreporter.write_line(line)
