import pytest

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Collects one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
