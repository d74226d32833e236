"""Shared pytest plumbing.

Tests marked ``@pytest.mark.criterion(n, "text")`` feed an acceptance
summary printed after the run: one ``[PASS]``/``[FAIL]`` line per
criterion.  A test may attach extra context to its line with
``record_property("detail", "...")``.
"""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, text): numbered acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when == "teardown":
        return
    num, text = marker.args
    if rep.when == "setup" and rep.passed:
        return  # wait for the call phase
    passed = rep.passed and _RESULTS.get(num, (None, True, None))[1]
    detail = dict(item.user_properties).get("detail", "")
    prev_detail = _RESULTS.get(num, (None, None, ""))[2]
    _RESULTS[num] = (text, passed, detail or prev_detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        text, passed, detail = _RESULTS[num]
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {num}: {text}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
