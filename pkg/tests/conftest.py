import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record a ``C<n> PASS|FAIL <detail>`` line for the terminal summary."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"{criterion} {'PASS' if ok else 'FAIL'} {detail}")
        print(_ACCEPTANCE[-1])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: (int(s.split()[0][1:].rstrip("abcd")), s)):
            terminalreporter.write_line(line)
