"""Acceptance bookkeeping: one pass/fail line per criterion at the end of the run."""
import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _OUTCOMES.setdefault(n, {"title": title, "ok": True, "seen": False, "notes": []})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        entry["ok"] &= report.passed
        entry["notes"] += [v for k, v in item.user_properties if k == "note" and v not in entry["notes"]]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        e = _OUTCOMES[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        tr.write_line(f"criterion {n}: {status}  {e['title']}")
        for note in e["notes"]:
            for line in note.splitlines():
                tr.write_line(f"    {line}")
