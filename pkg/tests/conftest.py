"""Collects one result line per acceptance criterion and prints them after the run."""

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        _RESULTS[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
