import pytest

_acceptance = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): headline acceptance criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance.append((marker.args[0], report.passed, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, duration in _acceptance:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  ({duration:.1f} s)")
    terminalreporter.write_line(f"{sum(p for _, p, _ in _acceptance)}/{len(_acceptance)} criteria met")
