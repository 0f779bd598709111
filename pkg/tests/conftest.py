import logging
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from deskgrid.harness import Cluster, start_cluster  # noqa: E402

logging.basicConfig(level=logging.WARNING)
logging.getLogger("deskgrid").setLevel(logging.WARNING)

# Snappy settings so failure-detection tests finish quickly.
FAST_MANAGER = dict(heartbeat_timeout_s=1.5, reaper_interval_s=0.1,
                    dispatch_interval_s=0.02)
FAST_EXECUTOR = dict(poll_interval_s=0.02, heartbeat_interval_s=0.2,
                     backoff_max_s=0.5)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, name): acceptance criterion; reported as its own line",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # one verdict line per criterion: failures/errors from any phase,
    # skips from setup, everything else from the call phase
    verdict = None
    if report.outcome == "failed":
        verdict = "FAIL"
    elif report.skipped:
        verdict = "SKIP"
    elif report.when == "call" and report.outcome == "passed":
        verdict = "PASS"
    if verdict is None:
        return
    num, name = marker.args
    line = f"[criterion {num:02d}] {name}: {verdict}"
    reporter = item.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line(line)


def read_fixture(name: str) -> str:
    with open(os.path.join(FIXTURES, name), encoding="ascii") as fh:
        return fh.read().strip()


@pytest.fixture
def pi_oracle_digits() -> str:
    return read_fixture("pi_digits_10000.txt")


@pytest.fixture
def make_cluster(tmp_path):
    """Factory for fast-configured in-process clusters, stopped on teardown."""
    clusters: list[Cluster] = []
    counter = [0]

    def make(executors: int = 1, slots: int = 1, dedicated: bool = False,
             parent_address: str | None = None, manager_kw: dict | None = None,
             executor_kw: dict | None = None) -> Cluster:
        counter[0] += 1
        cluster = start_cluster(
            str(tmp_path / f"cluster{counter[0]}"),
            executors=executors, slots=slots, dedicated=dedicated,
            parent_address=parent_address,
            manager_kw={**FAST_MANAGER, **(manager_kw or {})},
            executor_kw={**FAST_EXECUTOR, **(executor_kw or {})},
        )
        clusters.append(cluster)
        return cluster

    yield make
    for cluster in reversed(clusters):
        cluster.stop()
