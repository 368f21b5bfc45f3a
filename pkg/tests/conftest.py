"""Collects per-criterion outcomes of the acceptance suite and prints a summary."""

import pytest

RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")


@pytest.fixture
def detail(request):
    """Append a line of measured values to the criterion summary."""
    marker = request.node.get_closest_marker("criterion")
    lines = RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "outcomes": [], "details": []})["details"]
    return lines.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "outcomes": [], "details": []})
    entry["outcomes"].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(RESULTS):
        entry = RESULTS[num]
        ok = bool(entry["outcomes"]) and all(entry["outcomes"])
        tr.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {entry['title']}")
        for d in entry["details"]:
            tr.write_line(f"               {d}")
