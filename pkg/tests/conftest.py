import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "details": []})
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")
        if report.failed:
            entry["details"].append(f"{item.name} failed: {report.longrepr.reprcrash.message.splitlines()[0]}"
                                    if hasattr(report.longrepr, "reprcrash") else f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{status}] {entry['title']}")
        for d in entry["details"]:
            terminalreporter.write_line(f"    {d}")


@pytest.fixture
def detail(request):
    """Attach a line of evidence to the acceptance summary."""

    def add(text):
        request.node.user_properties.append(("detail", text))

    return add
