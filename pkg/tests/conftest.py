"""Collects acceptance verdicts and prints one line per criterion at the end of the session."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        _VERDICTS[number] = (name, passed, detail)
        print(_line(number))
        return passed
    return record


def _line(number: int) -> str:
    name, passed, detail = _VERDICTS[number]
    return f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_line(number))
