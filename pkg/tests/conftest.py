"""Shared pytest hooks: the acceptance verdicts are repeated in the terminal summary."""

import pytest

_VERDICTS: list = []


@pytest.fixture(scope="session")
def verdicts():
    """Append ``"criterion k: PASS|FAIL ..."`` lines; they are printed once at the end."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
