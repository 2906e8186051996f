"""Shared fixtures: acceptance-criterion reporting."""

import pytest

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def report_criterion():
    """Record one acceptance line; the terminal summary prints every recorded line."""

    def record(key: str, passed: bool, detail: str) -> bool:
        _CRITERIA[key] = (bool(passed), detail)
        print(f"{key}: {'PASS' if passed else 'FAIL'} -- {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k.split()[1])):
        passed, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'} -- {detail}")
