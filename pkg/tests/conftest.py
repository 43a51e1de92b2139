import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (report.when == "call" or report.failed):
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        results = item.config.stash[_RESULTS]
        prev = results.get(number)
        passed = report.passed and (prev is None or prev[1])
        results[number] = (title, passed, detail)
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
