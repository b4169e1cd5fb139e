import numpy as np
import pytest

RESULTS_KEY = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.stash[RESULTS_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(name, passed, detail)``."""
    results = request.config.stash[RESULTS_KEY]

    def record(name, passed, detail=""):
        results.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(RESULTS_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
