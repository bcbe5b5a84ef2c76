"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_verdicts: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        number, title = marker.args
        detail = dict(item.user_properties).get("measured", "")
        _verdicts[number] = ("FAIL" if failed else "PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        verdict, title, detail = _verdicts[number]
        line = f"{verdict} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
