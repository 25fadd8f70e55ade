import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_detail(request):
    """Attach a short measurement summary to an acceptance test's report line."""
    def record(text: str) -> None:
        marker = request.node.get_closest_marker("acceptance")
        if marker is not None:
            _ACCEPTANCE.setdefault(marker.args[0], {})["detail"] = text
        print(text)
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {})
    entry["title"] = title
    if report.when == "call" or (report.when == "setup" and report.failed):
        entry["passed"] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        if "passed" not in entry:
            continue
        status = "PASS" if entry["passed"] else "FAIL"
        detail = entry.get("detail", "")
        terminalreporter.write_line(f"criterion {number} [{status}] {entry['title']}"
                                    + (f" | {detail}" if detail else ""))
