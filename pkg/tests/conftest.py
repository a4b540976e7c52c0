import pytest

from pekar.solver import solve

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def sol():
    return solve()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
