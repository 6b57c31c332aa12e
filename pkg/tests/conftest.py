import pytest

_criteria = {}


@pytest.fixture
def record_criterion():
    """Store one acceptance outcome for the end-of-run summary."""

    def record(number, ok, detail):
        _criteria[number] = (ok, detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, detail = _criteria[number]
        terminalreporter.write_line(f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
