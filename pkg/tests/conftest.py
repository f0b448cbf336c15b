"""Shared pytest setup: one PASS/FAIL line per acceptance criterion at session end."""

from __future__ import annotations

import pytest

_RESULTS: dict[str, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(tag, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    tag, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _RESULTS[tag] = (status, title, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(_RESULTS):
        status, title, seconds = _RESULTS[tag]
        terminalreporter.write_line(f"{status} {tag} {title} ({seconds:.1f} s)")
