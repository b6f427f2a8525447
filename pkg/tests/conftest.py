import contextlib

import pytest

_CRITERIA = {}


@contextlib.contextmanager
def _record(number, title):
    try:
        yield
    except BaseException:
        _CRITERIA[number] = f"criterion {number} FAIL  {title}"
        raise
    _CRITERIA[number] = f"criterion {number} PASS  {title}"


@pytest.fixture
def criterion():
    """``with criterion(n, title):`` records a pass/fail line for the summary."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
