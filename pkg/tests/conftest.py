import pytest

_results = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _results.append((marker.args[0], marker.args[1], report.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, details in sorted(_results):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{verdict}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}  ({details})" if details else line)
