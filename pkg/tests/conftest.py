import os

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _ACCEPTANCE:
        props = dict(rep.user_properties)
        status = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"{status} criterion {props.get('criterion', '?')}: {props.get('detail', rep.nodeid)}")


_ACCEPTANCE = []
