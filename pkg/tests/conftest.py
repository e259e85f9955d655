"""Shared pytest hooks: the acceptance suite's PASS/FAIL lines go in the terminal summary."""
import pytest

_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one acceptance line and asserts ``ok``."""
    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _ACCEPTANCE.append((n, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
