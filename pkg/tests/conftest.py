"""Collect acceptance-criterion outcomes and print one line per criterion."""

import re

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_", item.name)
    if not m or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    _RESULTS[int(m.group(1))] = ("PASS" if report.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, name, detail = _RESULTS[number]
        line = f"CRITERION {number}: {status}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
