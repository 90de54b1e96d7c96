"""One pass/fail line per acceptance criterion, printed after the test summary."""
import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by this test")
    config.stash[_RESULTS] = {}


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion line, e.g. ``detail("mF1B 0.91")``."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    results = item.config.stash[_RESULTS]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        info = "; ".join(v for k, v in item.user_properties if k == "detail")
        state = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        results[label] = (state, info)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label, (state, info) in results.items():
        terminalreporter.write_line(f"{state}  {label}" + (f"  [{info}]" if info else ""))
