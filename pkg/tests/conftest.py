import pytest

_LINES = []


@pytest.fixture
def criterion_report():
    """Record one PASS/FAIL line; all lines are printed in the terminal summary."""
    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _LINES.append(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
