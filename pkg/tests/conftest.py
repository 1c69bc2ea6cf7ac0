import pytest

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        detail = dict(item.user_properties).get("detail", "")
        _criteria[n] = [item.name, "FAIL" if failed else "PASS", detail]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, verdict, detail = _criteria[n]
        line = f"criterion {n}: {verdict}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
