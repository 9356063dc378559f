import numpy as np
import pytest
from hypothesis import settings

from structured_gic.model_space import GroupL2, GroupPartition, Nuclear

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_groups():
    """Groups {0,1} and {2,3} of a length-4 vector."""
    return GroupL2(GroupPartition(((0, 1), (2, 3))))


@pytest.fixture
def uneven_groups():
    return GroupL2(GroupPartition(((0, 5, 2), (1,), (3, 4, 6, 7), (8, 9))))


@pytest.fixture
def nuclear():
    return Nuclear((5, 4))
