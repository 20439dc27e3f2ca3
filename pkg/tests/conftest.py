import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    number, text = mark.args
    if report.when == "call" or report.failed:
        detail = dict(item.user_properties).get("detail", "")
        _criteria[number] = ("PASS" if report.passed else "FAIL", text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, text, detail = _criteria[number]
        line = f"criterion {number}: {status}  {text}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
