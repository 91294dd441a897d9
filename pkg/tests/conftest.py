"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import re

import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m or (rep.when != "call" and rep.passed):
        return
    n = int(m.group(1))
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or n not in _CRITERIA:
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", detail)
    elif rep.failed:
        _CRITERIA[n] = ("FAIL", f"{rep.when} error")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
