import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from amodflow import data_path  # noqa: E402
from amodflow.ingest import load_network  # noqa: E402
from amodflow.netcore import build_supergraph  # noqa: E402

BUNDLED = ["grid4.json", "grid4_walk.json"] + [f"synthetic_{k}.json" for k in range(1, 6)]


@pytest.fixture
def grid4():
    return load_network(data_path("grid4.json"))


@pytest.fixture
def diamond():
    """s -> {a, b} -> t with one cross arc a -> b."""
    return build_supergraph(
        ["s", "a", "b", "t"],
        [("s", "a", 1.0, 10.0), ("s", "b", 2.0, 10.0), ("a", "t", 2.0, 10.0),
         ("b", "t", 1.0, 10.0), ("a", "b", 0.5, 10.0)])


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    marker = _MARKS.get(report.nodeid)
    if marker is None:
        return
    n, title = marker
    ok = not report.failed and not (report.when == "call" and report.skipped)
    prev = _CRITERIA.get(n, (title, True))
    _CRITERIA[n] = (title, prev[1] and ok)


_MARKS: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _MARKS[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}")
