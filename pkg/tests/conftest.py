import pytest

_CRITERIA = {}
_NOTES = {}


@pytest.fixture
def criterion_note(request):
    """Attach measured values to the summary line of the test's criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def note(text):
        _NOTES.setdefault(n, []).append(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["seen"] = True
        entry["ok"] &= report.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n} [PRIMARY] {e['title']}: {status}")
        for text in _NOTES.get(n, []):
            terminalreporter.write_line(f"    {text}")
