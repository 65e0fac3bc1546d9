import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on its own."""

    def record(n: int, ok: bool, detail: str):
        _CRITERIA[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
