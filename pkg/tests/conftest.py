import pytest

_REPORT_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(label, title, passed, detail)``."""
    lines = request.config.stash[_REPORT_KEY]

    def record(label, title, passed, detail):
        lines.append(f"criterion {label:<3} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_REPORT_KEY]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
