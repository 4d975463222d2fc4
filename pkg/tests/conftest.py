import pytest


@pytest.fixture
def gate(request):
    """Print one pass/fail line per acceptance criterion, then assert.

    The line goes through the terminal reporter so it stays visible under
    pytest's default output capture.
    """
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def _gate(num, name, ok, detail):
        line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return _gate
