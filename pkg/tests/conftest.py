import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def record():
    """Store one summary line per acceptance criterion."""
    def _record(number: int, passed: bool, detail: str) -> None:
        CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    return _record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
