import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; printed now and again in the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(number: int, ok: bool, text: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        print("\n" + line)
        lines.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
