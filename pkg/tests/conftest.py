import pytest

_RESULTS = {}
_SETUP = pytest.StashKey[float]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    number, title = mark.args
    if report.when == "setup" and report.passed:
        # shared fixtures (the scaling ladder) count toward the first criterion that uses them
        item.stash[_SETUP] = report.duration
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    duration = report.duration + item.stash.get(_SETUP, 0.0)
    _RESULTS[number] = (title, report.outcome, duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, outcome, duration, detail = _RESULTS[number]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"criterion {number:2d} {status}  {title} ({duration:.1f} s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
