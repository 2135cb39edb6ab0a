import numpy as np
import pytest
from hypothesis import settings

from warehouse_eir.layouts import make_layout

_CRITERIA = pytest.StashKey[list]()

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def layout_a():
    return make_layout("A", 3, 6, seed=0)


@pytest.fixture(scope="session")
def layout_a_small():
    """Two agents, four incidents: quick to simulate."""
    return make_layout("A", 2, 4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """``criterion(name, ok, detail)`` prints and records one pass/fail line,
    then fails the test when ``ok`` is false."""
    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        print(line)
        request.config.stash[_CRITERIA].append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
