"""Acceptance bookkeeping: tests tagged ``@pytest.mark.criterion(n, title)`` get one summary line each."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "ran": False, "skipped": False, "details": []})
    if report.skipped:
        entry["skipped"] = True
    elif report.when == "call" or report.failed:
        entry["ran"] = entry["ran"] or report.when == "call"
        entry["ok"] = entry["ok"] and report.passed
        entry["details"] += [v for k, v in report.user_properties if k == "detail" and report.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "SKIP" if e["skipped"] and e["ok"] and not e["ran"] else ("PASS" if e["ok"] and e["ran"] else "FAIL")
        tr.write_line(f"[{status}] criterion {number}: {e['title']}")
        for d in e["details"]:
            tr.write_line(f"         {d}")
