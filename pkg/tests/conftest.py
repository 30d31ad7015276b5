import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vfladmm.dataset import PartyShard
from vfladmm.harness import load_config, prepare_data

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--full-data", action="store_true", default=False,
                     help="run checks that need the full-size datasets")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full-data"):
        return
    skip = pytest.mark.skip(reason="needs --full-data")
    for item in items:
        if "fulldata" in item.keywords:
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    num, title = mark.args
    entry = item.config._criteria.setdefault(num, {"title": title, "passed": 0, "failed": 0, "skipped": 0})
    if rep.failed:
        entry["failed"] += 1
    elif rep.skipped:
        entry["skipped"] += 1
    else:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = getattr(config, "_criteria", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(store):
        e = store[num]
        status = "FAIL" if e["failed"] else "PASS" if e["passed"] else "SKIP"
        extra = f" ({e['skipped']} skipped)" if e["skipped"] and e["passed"] else ""
        terminalreporter.write_line(f"criterion {num:2d}: {status} {e['title']}{extra}")


# ------------------------------------------------------------- fixtures

@pytest.fixture(autouse=True)
def _dual_gap_guard(caplog):
    """Every engine run in every test must keep the dual identity (warning-free)."""
    caplog.set_level(logging.WARNING)
    yield
    bad = [r.getMessage() for r in caplog.records if "dual identity gap" in r.getMessage()]
    assert not bad, bad


@pytest.fixture(scope="session")
def a9a_config():
    return load_config(CONFIGS / "a9a.json")


@pytest.fixture(scope="session")
def a9a200(a9a_config):
    return prepare_data(a9a_config)


@pytest.fixture(scope="session")
def a9a_full(a9a_config):
    return prepare_data(a9a_config, full_data=True)


@pytest.fixture(scope="session")
def assumption_config():
    return load_config(CONFIGS / "a9a_assumptions.json")


@pytest.fixture(scope="session")
def assumption_data(assumption_config):
    return prepare_data(assumption_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_shards(rng, n, widths, full_rank=True):
    shards = []
    off = 0
    for m, w in enumerate(widths):
        B = rng.standard_normal((n, w)) / np.sqrt(w)
        if not full_rank and w > 1:
            B[:, -1] = B[:, 0]
        shards.append(PartyShard(m, B, off))
        off += w
    return shards


def random_labels(rng, n):
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)
