import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
