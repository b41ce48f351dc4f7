"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

CRITERION_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        previous = CRITERION_RESULTS.get(label, True)
        CRITERION_RESULTS[label] = previous and not failed


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in CRITERION_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
