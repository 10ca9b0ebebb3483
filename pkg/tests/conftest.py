import pytest

_REPORT_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT_KEY] = []


@pytest.fixture
def report(request):
    """Record one acceptance line: report(number, passed, detail)."""
    lines = request.config.stash[_REPORT_KEY]

    def record(number, passed, detail):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
