import pytest

# (number, passed, detail) for each acceptance criterion that ran
CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record a criterion's verdict: call ``criterion(number, passed, detail)``."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        CRITERIA.append((number, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
