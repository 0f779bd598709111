"""Topology and benchmark harness.

Builders for whole deployments: an in-process cluster (one manager plus
executors, handy for tests), federation chains of managers, and
subprocess-backed managers/executors that can be SIGKILLed to stage
real crashes. On top of those sits the pi benchmark: run the same digit
workload at several executor counts, verify every run against the
bundled oracle digits, and report wall times and speedups.
"""

from __future__ import annotations

import os
import shutil
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass
from importlib import resources

from deskgrid import httpio
from deskgrid.errors import DeskgridError, UnreachableError
from deskgrid.executor import Executor, ExecutorConfig
from deskgrid.manager import Manager, ManagerConfig
from deskgrid.sdk import run_pi_application

PI_ORACLE_RESOURCE = "pi_digits_10000.txt"


def pi_oracle(digits: int) -> str:
    """First ``digits`` fractional digits of pi from the bundled table."""
    text = (
        resources.files("deskgrid").joinpath("data").joinpath(PI_ORACLE_RESOURCE)
        .read_text(encoding="ascii").strip()
    )
    if digits > len(text):
        raise ValueError(f"oracle holds {len(text)} digits, {digits} requested")
    return text[:digits]


def wait_for(predicate, timeout: float, what: str, interval: float = 0.05) -> None:
    deadline = time.monotonic() + timeout
    while True:
        if predicate():
            return
        if time.monotonic() >= deadline:
            raise TimeoutError(f"timed out after {timeout:.0f}s waiting for {what}")
        time.sleep(interval)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


# ---------------------------------------------------------------------------
# In-process topologies.


@dataclass
class Cluster:
    manager: Manager
    executors: list[Executor]

    @property
    def address(self) -> str:
        return self.manager.address

    def stop(self) -> None:
        for executor in self.executors:
            executor.stop()
        self.manager.stop()

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()


def start_cluster(workdir: str, executors: int = 1, slots: int = 1,
                  dedicated: bool = False, parent_address: str | None = None,
                  manager_kw: dict | None = None, executor_kw: dict | None = None) -> Cluster:
    os.makedirs(workdir, exist_ok=True)
    manager = Manager(ManagerConfig(
        store_path=os.path.join(workdir, "manager.journal"),
        parent_address=parent_address,
        **(manager_kw or {}),
    )).start()
    members: list[Executor] = []
    try:
        for i in range(executors):
            members.append(Executor(ExecutorConfig(
                manager_address=manager.address,
                slots=slots,
                dedicated=dedicated,
                sandbox_root=os.path.join(workdir, f"sandbox-{i}"),
                **(executor_kw or {}),
            )).start())
        wait_for(
            lambda: len(manager.registry_view().executors) >= executors,
            timeout=10.0, what=f"{executors} executors to register",
        )
    except BaseException:
        for member in members:
            member.stop()
        manager.stop()
        raise
    return Cluster(manager=manager, executors=members)


def start_chain(workdir: str, levels: int, executors_per_level: int = 1,
                slots: int = 1, manager_kw: dict | None = None,
                executor_kw: dict | None = None) -> list[Cluster]:
    """Federation chain: clusters[0] is the root, each next level is its child."""
    if levels < 1:
        raise ValueError("a chain needs at least one level")
    clusters: list[Cluster] = []
    try:
        for level in range(levels):
            parent = clusters[-1].address if clusters else None
            clusters.append(start_cluster(
                os.path.join(workdir, f"level-{level}"),
                executors=executors_per_level, slots=slots,
                parent_address=parent, manager_kw=manager_kw, executor_kw=executor_kw,
            ))
    except BaseException:
        for cluster in reversed(clusters):
            cluster.stop()
        raise
    return clusters


# ---------------------------------------------------------------------------
# Subprocess-backed components, killable for crash drills.


class _Proc:
    def __init__(self, argv: list[str], address: str) -> None:
        self.address = address
        self._argv = argv
        self._proc: subprocess.Popen | None = None

    def start(self, wait_ready: bool = True, timeout: float = 15.0) -> "_Proc":
        self._proc = subprocess.Popen(
            self._argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
            start_new_session=True,
        )
        if wait_ready:
            try:
                httpio.wait_ready(self.address, timeout=timeout)
            except DeskgridError:
                self.kill()
                raise
        return self

    def kill(self) -> None:
        """SIGKILL: the process gets no chance to flush or say goodbye."""
        if self._proc is not None and self._proc.poll() is None:
            self._proc.send_signal(signal.SIGKILL)
            self._proc.wait(timeout=10.0)

    def terminate(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=10.0)
            except subprocess.TimeoutExpired:
                self.kill()

    @property
    def running(self) -> bool:
        return self._proc is not None and self._proc.poll() is None


class ManagerProc(_Proc):
    def __init__(self, store_path: str, port: int | None = None,
                 heartbeat_timeout_s: float = 5.0, parent_address: str | None = None,
                 parent_dedicated: bool = False) -> None:
        self.port = port if port is not None else free_port()
        self.store_path = store_path
        argv = [
            sys.executable, "-m", "deskgrid", "manager",
            "--store", store_path, "--host", "127.0.0.1", "--port", str(self.port),
            "--heartbeat-timeout", str(heartbeat_timeout_s),
        ]
        if parent_address:
            argv += ["--parent", parent_address]
            if parent_dedicated:
                argv += ["--parent-dedicated"]
        super().__init__(argv, f"127.0.0.1:{self.port}")


class ExecutorProc(_Proc):
    def __init__(self, manager_address: str, slots: int = 1,
                 sandbox_root: str | None = None, identity: str | None = None,
                 poll_interval_s: float = 0.05, heartbeat_interval_s: float = 0.5) -> None:
        self.manager_address = manager_address
        argv = [
            sys.executable, "-m", "deskgrid", "executor",
            "--manager", manager_address, "--slots", str(slots),
            "--poll-interval", str(poll_interval_s),
            "--heartbeat-interval", str(heartbeat_interval_s),
        ]
        if sandbox_root:
            argv += ["--sandbox", sandbox_root]
        if identity:
            argv += ["--identity", identity]
        super().__init__(argv, manager_address)

    def start(self, wait_ready: bool = False, timeout: float = 15.0) -> "ExecutorProc":
        # Readiness is observed through the manager's registry, not a port.
        return super().start(wait_ready=False)


def registered_executor_count(manager_address: str) -> int:
    try:
        view = httpio.call(manager_address, "GET", "/api/executors", timeout=2.0)
    except UnreachableError:
        return 0
    return len(view.executors)


# ---------------------------------------------------------------------------
# Benchmark.


@dataclass(frozen=True)
class BenchmarkRow:
    digits: int
    executors: int
    seconds: float
    speedup: float
    digits_ok: bool


def run_benchmark(workdir: str, digit_totals: tuple[int, ...] = (1000, 2200),
                  executor_counts: tuple[int, ...] = (1, 6), slice_size: int = 50,
                  work_scale: int = 25, use_processes: bool = True,
                  timeout: float = 600.0) -> list[BenchmarkRow]:
    """Time the pi application at each executor count, checking every answer."""
    rows: list[BenchmarkRow] = []
    run = 0
    for digits in digit_totals:
        want = pi_oracle(digits)
        base_seconds: float | None = None
        for count in executor_counts:
            run += 1
            rundir = os.path.join(workdir, f"run-{run}")
            seconds, got = _run_once(rundir, digits, count, slice_size,
                                     work_scale, use_processes, timeout)
            if base_seconds is None:
                base_seconds = seconds
            rows.append(BenchmarkRow(
                digits=digits, executors=count, seconds=seconds,
                speedup=base_seconds / seconds if seconds else float("inf"),
                digits_ok=got == want,
            ))
            shutil.rmtree(rundir, ignore_errors=True)
    return rows


def _run_once(workdir: str, digits: int, executors: int, slice_size: int,
              work_scale: int, use_processes: bool, timeout: float) -> tuple[float, str]:
    os.makedirs(workdir, exist_ok=True)
    if not use_processes:
        cluster = start_cluster(workdir, executors=executors)
        try:
            began = time.monotonic()
            got = run_pi_application(cluster.address, digits, slice_size=slice_size,
                                     work_scale=work_scale, timeout=timeout)
            return time.monotonic() - began, got
        finally:
            cluster.stop()
    manager = ManagerProc(os.path.join(workdir, "manager.journal")).start()
    procs = [
        ExecutorProc(manager.address,
                     sandbox_root=os.path.join(workdir, f"sandbox-{i}")).start()
        for i in range(executors)
    ]
    try:
        wait_for(lambda: registered_executor_count(manager.address) >= executors,
                 timeout=20.0, what=f"{executors} executor processes")
        began = time.monotonic()
        got = run_pi_application(manager.address, digits, slice_size=slice_size,
                                 work_scale=work_scale, timeout=timeout)
        return time.monotonic() - began, got
    finally:
        for proc in procs:
            proc.terminate()
        manager.terminate()


def format_benchmark(rows: list[BenchmarkRow]) -> str:
    lines = [f"{'digits':>8} {'executors':>9} {'seconds':>9} {'speedup':>8} {'correct':>8}"]
    for row in rows:
        lines.append(
            f"{row.digits:>8} {row.executors:>9} {row.seconds:>9.2f} "
            f"{row.speedup:>8.2f} {str(row.digits_ok).lower():>8}"
        )
    return "\n".join(lines)
