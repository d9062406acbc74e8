import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CRITERIA_KEY = "criterion"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in item.nodeid:
        return
    lines = [v for k, v in item.user_properties if k == CRITERIA_KEY]
    if report.failed and not lines:
        marker = item.get_closest_marker("criterion")
        label = marker.args[0] if marker else item.name
        lines = [f"FAIL  {label}: raised before reporting ({call.excinfo.typename})"]
    item.config.stash.setdefault(_LINES, []).extend(lines)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test checks")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


_LINES = pytest.StashKey[list]()
