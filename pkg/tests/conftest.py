import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record and print the outcome of one acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (ok, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
