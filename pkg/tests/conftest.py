import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line: ``report(n, ok, detail)``."""
    lines = request.config.stash.setdefault(_LINES, [])

    def _report(n, ok: bool, detail: str) -> bool:
        lines.append((str(n), f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"))
        print(lines[-1][1])
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(text)
