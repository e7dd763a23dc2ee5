import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.failed):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        prev = _RESULTS.get(marker.args[0])
        if prev is None or prev[0]:
            _RESULTS[marker.args[0]] = (report.passed, marker.args[1], detail)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, title, detail = _RESULTS[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
