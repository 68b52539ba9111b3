from __future__ import annotations

import pytest

_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture(autouse=True)
def _criterion_marker(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties.append(("criterion", tuple(m.args)))
    yield


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _CRITERIA.setdefault(report.nodeid, {"criterion": props["criterion"], "outcome": "passed", "seconds": 0.0})
    entry["seconds"] += report.duration
    entry["detail"] = props.get("detail", "")
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped and entry["outcome"] == "passed":
        entry["outcome"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_CRITERIA.values(), key=lambda e: e["criterion"][0]):
        number, title = entry["criterion"]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[entry["outcome"]]
        line = f"{status} criterion {number:>2} {title} ({entry['seconds']:.1f}s)"
        if entry["detail"]:
            line += f": {entry['detail']}"
        terminalreporter.write_line(line)
