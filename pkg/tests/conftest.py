import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Record one acceptance outcome, then assert it."""
    def check(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _RESULTS.setdefault(number, []).append((ok, line))
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        for _, line in _RESULTS[number]:
            terminalreporter.write_line(line)
