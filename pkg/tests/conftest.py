import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """One fixture set (seed 0) shared by the slower tests."""
    from regfree_sr.fixtures import make_fixtures

    d = tmp_path_factory.mktemp("fixtures")
    make_fixtures(0, d)
    return d


# --- acceptance summary -----------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "text")`` get one PASS/FAIL line each
# in the terminal summary (visible without -s).

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = _criteria.get(n, (text, True, ""))
    detail = getattr(item, "criterion_detail", "")
    _criteria[n] = (text, prev[1] and not failed, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        text, ok, detail = _criteria[n]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {text}" + (f"  [{detail}]" if detail else ""))
