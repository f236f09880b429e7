"""Collects acceptance outcomes and prints one line per criterion."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_outcomes = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None or "test_acceptance" not in report.nodeid:
        return
    n = int(m.group(1))
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(n, "PASS")
    elif report.skipped:
        _outcomes.setdefault(n, "SKIPPED")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        terminalreporter.write_line(f"CRITERION {n}: {_outcomes.get(n, 'NOT RUN')}")
