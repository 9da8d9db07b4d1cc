from __future__ import annotations

import pytest
from hypothesis import settings

settings.register_profile("fedmesh", deadline=None, max_examples=60)
settings.load_profile("fedmesh")

# criterion number -> (title, passed)
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: pytest.Item, call: pytest.CallInfo):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    if report.when == "setup" and report.passed:
        return
    prev = ACCEPTANCE.get(n, (title, True))[1]
    ACCEPTANCE[n] = (title, prev and report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
