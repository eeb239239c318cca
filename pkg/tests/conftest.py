import numpy as np
import pytest

from randblowup.modulation import TailTable
from randblowup.profiles import ProfileTable, solve_ground_state


@pytest.fixture(scope="session")
def q():
    return solve_ground_state()


@pytest.fixture(scope="session")
def table(q):
    return ProfileTable.build(b_max=0.3, db=0.01, q=q)


@pytest.fixture(scope="session")
def tails(table):
    return TailTable.build(table)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
