"""Collect outcomes of tests tagged ``@pytest.mark.criterion(n, "title")`` and
print one PASS/FAIL line per acceptance criterion at the end of the run."""
from collections import OrderedDict

import pytest

_results = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = marker.args
        entry = _results.setdefault(number, {"title": title, "passed": 0, "failed": []})
        if report.passed:
            entry["passed"] += 1
        elif not report.skipped:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "PASS" if not entry["failed"] else "FAIL"
        line = f"{status}  criterion {number}: {entry['title']}  ({entry['passed']} passed"
        if entry["failed"]:
            line += f", {len(entry['failed'])} failed: {', '.join(entry['failed'])}"
        terminalreporter.write_line(line + ")")
