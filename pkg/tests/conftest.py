import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict; the assertion itself stays in the test."""
    def record(number: int, passed: bool, detail: str) -> bool:
        prev = _CRITERIA.get(number)
        if prev is not None:
            passed, detail = prev[0] and passed, f"{prev[1]}; {detail}"
        _CRITERIA[number] = (passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
