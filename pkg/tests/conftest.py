import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        _RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
