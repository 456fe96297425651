import numpy as np
import pytest

from pcattack.model import init_model

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    num, title = marker
    detail = dict(report.user_properties).get("detail")
    prev = CRITERIA.get(num, (title, True, None))
    if report.failed or report.skipped:
        CRITERIA[num] = (title, False, detail or prev[2])
    elif report.when == "call":
        CRITERIA[num] = (title, prev[1], detail or prev[2])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        title, ok, detail = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {title}")
        if detail:
            for line in detail.splitlines():
                terminalreporter.write_line(f"    {line}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model(4, per_point_dims=(8, 16), head_dims=(8,), seed=3)
