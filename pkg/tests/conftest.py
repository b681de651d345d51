from __future__ import annotations

import numpy as np
import pytest

from helpers import make_transcript


@pytest.fixture
def transcript():
    return make_transcript([
        "Good morning. What brings you in today?",
        "I've had a cough for about two weeks and it won't go away.",
        "Any fever or chills? (typing)",
        "No fever, but I feel tired all the time.",
        "Let me listen to your lungs. (clears throat) Take a deep breath.",
        "Okay. My mother had asthma, if that matters.",
        "Your lungs sound clear. I'd like to order a chest x-ray.",
        "That sounds good, thank you doctor.",
    ])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# -- acceptance criterion summary --------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` are rolled up into one
# PASS / FAIL / SKIP line per criterion at the end of the run.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": 0, "failed": 0, "skipped": 0, "reason": ""})
    if report.when == "call" or report.outcome != "passed":
        entry[report.outcome] += 1
        if report.skipped and not entry["reason"]:
            entry["reason"] = str(report.longrepr[2]) if isinstance(report.longrepr, tuple) else ""


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        if e["failed"]:
            status = "FAIL"
        elif e["passed"]:
            status = "PASS"
        else:
            status = "SKIP"
        line = f"criterion {n:>2}: {status}  {e['title']}"
        if status == "SKIP" and e["reason"]:
            line += f"  ({e['reason']})"
        terminalreporter.write_line(line)
