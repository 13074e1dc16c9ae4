import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or (report.when == "setup" and failed):
        details = [v for k, v in item.user_properties if k == "detail"]
        _results[number] = (title, "FAIL" if failed else "PASS", details)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, details = _results[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}")
        for d in details:
            terminalreporter.write_line(f"              {d}")
