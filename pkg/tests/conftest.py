import numpy as np
import pytest

from tadm3d.phantom import generate_cohort
from tadm3d.training import Cohort


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cohort_dir(tmp_path_factory):
    """A 10-subject cohort at the minimum extent of 8."""
    root = tmp_path_factory.mktemp("tiny_cohort")
    generate_cohort(10, 3, root, extent=8)
    return root


@pytest.fixture(scope="session")
def tiny_cohort(tiny_cohort_dir):
    return Cohort(tiny_cohort_dir)


@pytest.fixture(scope="session")
def small_cohort_dir(tmp_path_factory):
    """A 12-subject cohort at 16^3."""
    root = tmp_path_factory.mktemp("small_cohort")
    generate_cohort(12, 5, root, extent=16)
    return root


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
