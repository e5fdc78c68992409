import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line and fail the test if the check did not hold."""

    def report(number, title, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        request.config.stash[_LINES].append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
