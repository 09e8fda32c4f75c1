import pytest

ACCEPTANCE = {}
N_CRITERIA = 10


@pytest.fixture
def acceptance_report():
    """``report(n, title, ok, detail)`` records one pass/fail line and asserts ``ok``."""

    def report(n, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}"
        ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"[FAIL] {n:2d}. not run or errored before reporting"))
