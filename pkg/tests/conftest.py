"""Session fixtures and the acceptance summary."""

import re

import pytest

from desk import DeskRuns

CRITERIA = {
    1: "metric oracles",
    2: "finite-difference gradient suite",
    3: "closed-form loss values",
    4: "architecture contracts",
    5: "phase-1 autoencoder PSNR",
    6: "direction-of-effect ablation",
    7: "SDC strategy harness",
    8: "determinism",
}
_outcomes = {}
_details = {}


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


@pytest.fixture
def note():
    """``note(n, text)`` attaches measured values to criterion ``n``."""
    def add(n, text):
        _details.setdefault(n, []).append(text)
    return add


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call":
        _outcomes.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        status = _outcomes.get(n, "NOT RUN")
        line = f"criterion {n} ({name}): {status}"
        if n in _details:
            line += "  [" + "; ".join(_details[n]) + "]"
        terminalreporter.write_line(line)
