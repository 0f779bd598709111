"""Executor agent: runs grid threads for a manager.

Two participation modes. A polling executor asks the manager for work
whenever it has a free slot; a dedicated executor opens a callback
server and lets the manager push work to it, refusing pushes while
saturated. Either way dependencies are materialized once per
application into a hash-verified sandbox directory, results are
reported with capped retries, and a heartbeat keeps the registration
alive across manager restarts.

Voluntary participation is a file-activity gate: while the watched file
has been touched recently the host counts as in use, no new work is
accepted, and whatever is in flight simply finishes.
"""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from deskgrid import httpio
from deskgrid.errors import DeskgridError, IntegrityError, NotFoundError, UnreachableError
from deskgrid.model import DependencyManifest, ThreadRecord, ThreadState, blob_hash, new_id
from deskgrid.taskkit import TaskContext, TaskFailure, get_task
from deskgrid.wire import (
    Ack,
    ExecutePush,
    PollResponse,
    PushAck,
    RegisterRequest,
    ResultReport,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExecutorConfig:
    manager_address: str
    slots: int = 1
    dedicated: bool = False
    callback_host: str = "127.0.0.1"
    callback_port: int = 0
    poll_interval_s: float = 0.05
    heartbeat_interval_s: float = 1.0
    backoff_max_s: float = 5.0
    sandbox_root: str | None = None
    identity: str | None = None
    activity_file: str | None = None
    activity_threshold_s: float = 2.0


class FileActivityGate:
    """Host is 'in use' while the watched file was modified recently."""

    def __init__(self, path: str | None, threshold_s: float) -> None:
        self._path = path
        self._threshold_s = threshold_s

    def idle(self) -> bool:
        if self._path is None:
            return True
        try:
            mtime = os.stat(self._path).st_mtime
        except OSError:
            return True
        return (time.time() - mtime) >= self._threshold_s


class SandboxCache:
    """Per-application dependency directories, populated and verified lazily."""

    def __init__(self, root: str) -> None:
        self._root = os.path.realpath(root)
        self._lock = threading.Lock()
        self._ready: set[str] = set()

    def ensure(self, app_id: str, manifest: DependencyManifest, fetch_blob) -> str:
        appdir = os.path.join(self._root, app_id)
        with self._lock:
            if app_id in self._ready:
                return appdir
            os.makedirs(appdir, exist_ok=True)
            for entry in manifest.entries:
                path = self._safe_path(appdir, entry.name)
                if os.path.isfile(path):
                    with open(path, "rb") as fh:
                        if blob_hash(fh.read()) == entry.content_hash:
                            continue
                data = fetch_blob(entry.name)
                if len(data) != entry.size or blob_hash(data) != entry.content_hash:
                    raise IntegrityError(
                        f"dependency {entry.name!r} failed its integrity check"
                    )
                os.makedirs(os.path.dirname(path), exist_ok=True)
                tmp = path + ".part"
                with open(tmp, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            self._ready.add(app_id)
            return appdir

    def _safe_path(self, appdir: str, name: str) -> str:
        if os.path.isabs(name):
            raise IntegrityError(f"dependency name {name!r} must be relative")
        path = os.path.realpath(os.path.join(appdir, name))
        appdir = os.path.realpath(appdir)
        if path != appdir and not path.startswith(appdir + os.sep):
            raise IntegrityError(f"dependency name {name!r} escapes the sandbox")
        return path


class Executor:
    def __init__(self, config: ExecutorConfig) -> None:
        self.config = config
        self.identity = config.identity or new_id()
        self._gate = FileActivityGate(config.activity_file, config.activity_threshold_s)
        if config.sandbox_root is None:
            self._sandbox_root = tempfile.mkdtemp(prefix="deskgrid-sbx-")
            self._own_sandbox = True
        else:
            self._sandbox_root = config.sandbox_root
            os.makedirs(self._sandbox_root, exist_ok=True)
            self._own_sandbox = False
        self._sandboxes = SandboxCache(self._sandbox_root)
        self._scratch_root = os.path.join(self._sandbox_root, "scratch")
        os.makedirs(self._scratch_root, exist_ok=True)
        self._pool = ThreadPoolExecutor(max_workers=config.slots,
                                        thread_name_prefix=f"exec-{self.identity[:6]}")
        self._lock = threading.Lock()
        self._in_flight = 0
        self._stop = threading.Event()
        self._abandoned = False
        self._loops: list[threading.Thread] = []
        self._server: httpio.ApiServer | None = None

    # ------------------------------------------------------------------
    # lifecycle

    def start(self) -> "Executor":
        if self.config.dedicated:
            self._server = httpio.ApiServer(
                [
                    ("POST", "/api/execute", lambda p, m: self.accept_push(m)),
                    ("GET", "/api/ping", lambda p, m: Ack()),
                ],
                host=self.config.callback_host, port=self.config.callback_port,
                name=f"executor-{self.identity[:6]}",
            ).start()
        self._register(startup=True)
        self._spawn(self._heartbeat_loop, "heartbeat")
        if not self.config.dedicated:
            self._spawn(self._poll_loop, "poll")
        log.info("executor %s started (%s, %d slots)", self.identity,
                 "dedicated" if self.config.dedicated else "polling", self.config.slots)
        return self

    def stop(self) -> None:
        """Finish in-flight work, report it, then shut down."""
        self._stop.set()
        for loop in self._loops:
            loop.join(timeout=5.0)
        self._pool.shutdown(wait=True)
        if self._server is not None:
            self._server.stop()
            self._server = None
        if self._own_sandbox:
            shutil.rmtree(self._sandbox_root, ignore_errors=True)

    def kill(self) -> None:
        """Vanish without reporting anything, like a powered-off host."""
        self._abandoned = True
        self._stop.set()
        if self._server is not None:
            self._server.stop()
            self._server = None
        self._pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self) -> "Executor":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()

    def _spawn(self, target, name: str) -> None:
        thread = threading.Thread(
            target=target, name=f"executor-{self.identity[:6]}-{name}", daemon=True
        )
        thread.start()
        self._loops.append(thread)

    # ------------------------------------------------------------------
    # registration and heartbeat

    def _register(self, startup: bool = False) -> None:
        request = RegisterRequest(
            dedicated=self.config.dedicated,
            slots=self.config.slots,
            is_manager=False,
            callback_address=self._server.address if self._server else None,
            identity=self.identity,
        )
        deadline = time.monotonic() + (10.0 if startup else 0.0)
        while True:
            try:
                httpio.call(self.config.manager_address, "POST", "/api/executors", request)
                return
            except UnreachableError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.1)

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.config.heartbeat_interval_s):
            try:
                httpio.call(
                    self.config.manager_address, "POST",
                    f"/api/executors/{self.identity}/heartbeat",
                )
            except NotFoundError:
                try:
                    self._register()
                except DeskgridError:
                    pass
            except DeskgridError:
                pass

    # ------------------------------------------------------------------
    # work intake

    def free_slots(self) -> int:
        with self._lock:
            return self.config.slots - self._in_flight

    def _poll_loop(self) -> None:
        backoff = self.config.poll_interval_s
        while not self._stop.is_set():
            if not self._gate.idle() or self.free_slots() <= 0:
                self._stop.wait(self.config.poll_interval_s)
                continue
            try:
                resp: PollResponse = httpio.call(
                    self.config.manager_address, "POST",
                    f"/api/executors/{self.identity}/poll",
                )
            except NotFoundError:
                try:
                    self._register()
                except DeskgridError:
                    self._stop.wait(backoff)
                continue
            except UnreachableError:
                self._stop.wait(backoff)
                backoff = min(backoff * 2, self.config.backoff_max_s)
                continue
            except DeskgridError as exc:
                log.warning("poll failed: %s", exc)
                self._stop.wait(backoff)
                continue
            backoff = self.config.poll_interval_s
            if resp.thread is None:
                self._stop.wait(self.config.poll_interval_s)
                continue
            self._launch(resp.thread, resp.manifest)

    def accept_push(self, push: ExecutePush) -> PushAck:
        if self._stop.is_set():
            return PushAck(accepted=False, reason="shutting down")
        if not self._gate.idle():
            return PushAck(accepted=False, reason="host in use")
        with self._lock:
            if self._in_flight >= self.config.slots:
                return PushAck(accepted=False, reason="all slots busy")
            self._in_flight += 1
        try:
            self._pool.submit(self._run, push.thread, push.manifest)
        except RuntimeError:
            with self._lock:
                self._in_flight -= 1
            return PushAck(accepted=False, reason="shutting down")
        return PushAck(accepted=True)

    def _launch(self, thread: ThreadRecord, manifest: DependencyManifest) -> None:
        with self._lock:
            self._in_flight += 1
        try:
            self._pool.submit(self._run, thread, manifest)
        except RuntimeError:
            with self._lock:
                self._in_flight -= 1

    # ------------------------------------------------------------------
    # execution

    def _fetch_blob(self, app_id: str):
        def fetch(name: str) -> bytes:
            blob = httpio.call(
                self.config.manager_address, "GET",
                f"/api/applications/{app_id}/blobs/{name}",
            )
            return blob.data
        return fetch

    def _run(self, thread: ThreadRecord, manifest: DependencyManifest) -> None:
        began = time.monotonic()
        try:
            sandbox = self._sandboxes.ensure(thread.app_id, manifest,
                                             self._fetch_blob(thread.app_id))
            fn = get_task(thread.task_kind)
            ctx = TaskContext(sandbox_dir=sandbox, scratch_root=self._scratch_root)
            result = fn(thread.input, ctx)
            report = ResultReport(
                thread_id=thread.thread_id, state=ThreadState.COMPLETED,
                result=result, duration_s=time.monotonic() - began,
            )
        except TaskFailure as exc:
            report = ResultReport(
                thread_id=thread.thread_id, state=ThreadState.FAILED,
                failure=str(exc), duration_s=time.monotonic() - began,
            )
        except DeskgridError as exc:
            report = ResultReport(
                thread_id=thread.thread_id, state=ThreadState.FAILED,
                failure=f"{exc.code}: {exc}", duration_s=time.monotonic() - began,
            )
        except Exception as exc:
            log.exception("task %s crashed", thread.task_kind)
            report = ResultReport(
                thread_id=thread.thread_id, state=ThreadState.FAILED,
                failure=f"task crashed: {exc!r}", duration_s=time.monotonic() - began,
            )
        try:
            if not self._abandoned:
                self._submit_report(report)
        finally:
            with self._lock:
                self._in_flight -= 1

    def _submit_report(self, report: ResultReport) -> None:
        delay = 0.2
        for attempt in range(8):
            if self._abandoned:
                return
            try:
                httpio.call(
                    self.config.manager_address, "POST",
                    f"/api/executors/{self.identity}/results", report,
                )
                return
            except UnreachableError:
                time.sleep(min(delay, 5.0))
                delay *= 2
            except NotFoundError as exc:
                log.warning("manager no longer tracks %s: %s", report.thread_id, exc)
                return
            except DeskgridError as exc:
                log.warning("result for %s rejected: %s", report.thread_id, exc)
                return
        log.error("gave up reporting result for %s after 8 attempts", report.thread_id)
