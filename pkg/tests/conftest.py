import pytest


@pytest.fixture
def record(request):
    """Log one pass/fail line per acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_KEY, [])

    def _record(number, ok, detail):
        lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return _record


_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
