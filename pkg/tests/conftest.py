"""Collects acceptance outcomes and prints one verdict line per criterion."""

import pytest

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def evidence(request):
    """Dict a criterion test fills with the measured numbers it judged."""
    data = {}
    request.node.evidence = data
    return data


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n = marker.args[0]
    ok = rep.passed
    detail = ", ".join(f"{k}={v}" for k, v in getattr(item, "evidence", {}).items())
    prev = CRITERIA.get(n)
    CRITERIA[n] = (ok and (prev is None or prev[0]), item.name if prev is None else prev[1], detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, name, detail = CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
