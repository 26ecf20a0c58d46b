import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion and return the verdict."""

    def record(label, ok, detail=""):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        print(line)
        _LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
