"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

import pytest

_verdicts: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    entry = _verdicts.setdefault(marker.args[0], [True, []])
    entry[0] = entry[0] and not rep.failed
    if rep.when == "call":
        entry[1] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        ok, notes = _verdicts[n]
        detail = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}{detail}")
