import os

# noise bypass is only reachable with this flag; set before privflow is imported
os.environ["PRIVFLOW_TEST_MODE"] = "1"

import pathlib

import pytest

from privflow import engine
from privflow.ledger import BudgetLedger

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def _fresh_population_cache():
    engine.clear_population_cache()
    yield
    engine.clear_population_cache()


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def ledger(tmp_path):
    return BudgetLedger(tmp_path / "budget.jsonl", {"alice": 1.0, "bob": 5.0, "lab": 1e9})


# -- acceptance report: one line per criterion ------------------------------

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        details = "; ".join(v for k, v in item.user_properties if k == "detail")
        verdict = "PASS" if report.passed else "FAIL"
        _CRITERIA.append(f"{marker.args[0]} {verdict}  {marker.args[1]}" + (f"  [{details}]" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
