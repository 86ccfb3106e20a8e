import pytest

_GATE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gate():
    """Record one acceptance line, then assert it."""

    def check(name: str, ok: bool, detail: str) -> None:
        _GATE_LINES.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if _GATE_LINES:
        terminalreporter.section("acceptance")
        for line in _GATE_LINES:
            terminalreporter.write_line(line)
