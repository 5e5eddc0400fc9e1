import contextlib

import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class _Result:
    detail = ""


@contextlib.contextmanager
def _record(number: int, name: str):
    result = _Result()
    try:
        yield result
    except BaseException:
        _CRITERIA[number] = (name, False, result.detail)
        raise
    _CRITERIA[number] = (name, True, result.detail)


@pytest.fixture
def criterion():
    """``with criterion(n, name) as r: ...``; set ``r.detail`` for the summary line."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[number]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
