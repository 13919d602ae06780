import re

import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record and print a one-line verdict for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if m and report.when == "call" and report.failed:
        n = int(m.group(1))
        if n not in ACCEPTANCE_LINES:
            msg = str(report.longrepr).strip().splitlines()[-1] if report.longrepr else "error"
            ACCEPTANCE_LINES[n] = f"criterion {n:>2}: FAIL  {msg}"
