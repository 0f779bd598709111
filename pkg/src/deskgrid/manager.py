"""Manager: admission, scheduling, dispatch, completion, federation.

One process-wide lock guards all scheduling state; every state change is
journaled before the HTTP reply that acknowledges it goes out. Executors
either poll for work or, when registered as dedicated, have work pushed
to their callback address. A manager can itself register with a parent
manager as an executor (``is_manager`` set), pulling work down only when
its own queue is empty and carrying each borrowed thread at one priority
unit below what the parent held it at.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, replace

from deskgrid import httpio
from deskgrid.errors import (
    DeskgridError,
    DuplicateError,
    NotFoundError,
    UnreachableError,
    ValidationError,
)
from deskgrid.model import (
    DEFAULT_PRIORITY,
    ApplicationRecord,
    DependencyManifest,
    ExecutorRecord,
    ThreadRecord,
    ThreadState,
    blob_hash,
    check_priority,
    new_id,
)
from deskgrid.scheduler import ReadyQueue, decay_priority
from deskgrid.store import JournalStore
from deskgrid.wire import (
    Ack,
    ApplicationCreated,
    ApplicationSubmit,
    EventLog,
    EventRecord,
    ExecutePush,
    FinishedResponse,
    NamedBlob,
    PollResponse,
    PushAck,
    RegisterRequest,
    RegisterResponse,
    RegistryView,
    ResultReport,
    ThreadsAccepted,
    ThreadStatus,
    ThreadStatusList,
    ThreadSubmit,
    decode_envelope,
    encode_envelope,
)

log = logging.getLogger(__name__)

UPSTREAM_OWNER = "__upstream__"


@dataclass(frozen=True)
class ManagerConfig:
    store_path: str
    host: str = "127.0.0.1"
    port: int = 0
    heartbeat_timeout_s: float = 5.0
    heartbeat_interval_s: float = 1.0
    reaper_interval_s: float = 0.25
    dispatch_interval_s: float = 0.02
    parent_address: str | None = None
    parent_dedicated: bool = False
    parent_slots: int = 1
    events_capacity: int = 4096


class Manager:
    def __init__(self, config: ManagerConfig) -> None:
        self.config = config
        self._lock = threading.RLock()
        self._store = JournalStore(config.store_path)
        self._threads: dict[str, ThreadRecord] = {}
        self._apps: dict[str, ApplicationRecord] = {}
        self._finlog: dict[str, list[str]] = {}
        self._executors: dict[str, ExecutorRecord] = {}
        self._assignments: dict[str, set[str]] = {}
        self._suspect: set[str] = set()
        self._ready = ReadyQueue()
        self._seq = 0
        self._events: deque[EventRecord] = deque(maxlen=config.events_capacity)
        self._events_base = 0  # absolute index of _events[0]
        self._stop = threading.Event()
        self._loops: list[threading.Thread] = []
        self._server: httpio.ApiServer | None = None
        self._parent_registered = False
        self.identity = self._load_identity()
        self._recover()

    # ------------------------------------------------------------------
    # persistence helpers

    def _load_identity(self) -> str:
        raw = self._store.get("meta", "identity")
        if raw is not None:
            return raw.decode("ascii")
        ident = new_id()
        self._store.put("meta", "identity", ident.encode("ascii"))
        return ident

    def _persist_thread(self, rec: ThreadRecord) -> None:
        self._store.put("thread", rec.thread_id, encode_envelope(rec))
        self._threads[rec.thread_id] = rec

    def _persist_app(self, rec: ApplicationRecord) -> None:
        self._store.put("app", rec.app_id, encode_envelope(rec))
        self._apps[rec.app_id] = rec

    def _persist_finlog(self, app_id: str) -> None:
        data = json.dumps(self._finlog.get(app_id, [])).encode("ascii")
        self._store.put("finlog", app_id, data)

    def _recover(self) -> None:
        for app_id, raw in self._store.items("app"):
            self._apps[app_id] = decode_envelope(raw)
        for app_id, raw in self._store.items("finlog"):
            self._finlog[app_id] = json.loads(raw)
        requeued = 0
        for thread_id, raw in self._store.items("thread"):
            rec: ThreadRecord = decode_envelope(raw)
            if rec.state in (ThreadState.SCHEDULED, ThreadState.EXECUTING):
                if rec.state is ThreadState.EXECUTING:
                    rec = rec.transitioned(ThreadState.READY, assigned_executor=None)
                else:
                    rec = rec.transitioned(ThreadState.READY)
                self._persist_thread(rec)
                requeued += 1
            else:
                self._threads[thread_id] = rec
            self._seq = max(self._seq, rec.seq + 1)
        for rec in sorted(self._threads.values(), key=lambda r: r.seq):
            if rec.state is ThreadState.READY:
                self._ready.enqueue(rec.thread_id, rec.priority, rec.seq)
        if requeued or self._threads:
            log.info(
                "recovered %d threads (%d returned to ready) from %s",
                len(self._threads), requeued, self._store.path,
            )
        self._event("recovered", threads=str(len(self._threads)), requeued=str(requeued))

    # ------------------------------------------------------------------
    # event log

    def _event(self, name: str, **detail: str) -> None:
        with self._lock:
            if len(self._events) == self._events.maxlen:
                self._events_base += 1
            self._events.append(EventRecord(ts=time.time(), name=name, detail=detail))

    def events_since(self, cursor: int) -> EventLog:
        with self._lock:
            start = max(cursor - self._events_base, 0)
            snapshot = list(self._events)[start:]
            return EventLog(events=tuple(snapshot), next_cursor=self._events_base + len(self._events))

    # ------------------------------------------------------------------
    # registry

    def register_executor(self, req: RegisterRequest) -> RegisterResponse:
        if req.slots < 1:
            raise ValidationError("executor slots must be >= 1")
        if req.dedicated and not req.callback_address:
            raise ValidationError("dedicated executor must supply a callback address")
        with self._lock:
            executor_id = req.identity or new_id()
            rec = ExecutorRecord(
                executor_id=executor_id,
                dedicated=req.dedicated,
                is_manager=req.is_manager,
                slots=req.slots,
                last_heartbeat=time.time(),
                callback_address=req.callback_address,
            )
            fresh = executor_id not in self._executors
            self._executors[executor_id] = rec
            self._assignments.setdefault(executor_id, set())
            self._suspect.discard(executor_id)
        self._event(
            "executor-registered" if fresh else "executor-reregistered",
            executor=executor_id, dedicated=str(req.dedicated).lower(),
            is_manager=str(req.is_manager).lower(), slots=str(req.slots),
        )
        return RegisterResponse(executor_id=executor_id)

    def heartbeat(self, executor_id: str) -> Ack:
        with self._lock:
            rec = self._executors.get(executor_id)
            if rec is None:
                raise NotFoundError(f"executor {executor_id} not registered")
            self._executors[executor_id] = replace(rec, last_heartbeat=time.time())
            self._suspect.discard(executor_id)
        return Ack()

    def registry_view(self) -> RegistryView:
        with self._lock:
            return RegistryView(
                executors=tuple(self._executors.values()),
                assignments={
                    eid: tuple(sorted(tids)) for eid, tids in self._assignments.items() if tids
                },
            )

    # ------------------------------------------------------------------
    # owner surface

    def submit_application(self, req: ApplicationSubmit) -> ApplicationCreated:
        if not req.owner_id:
            raise ValidationError("owner_id must be non-empty")
        provided = {blob.name: blob.data for blob in req.blobs}
        if len(provided) != len(req.blobs):
            raise ValidationError("duplicate blob names in submission")
        for entry in req.manifest.entries:
            data = provided.get(entry.name)
            if data is None:
                raise ValidationError(f"manifest names {entry.name!r} but no blob was sent")
            if len(data) != entry.size or blob_hash(data) != entry.content_hash:
                raise ValidationError(f"blob {entry.name!r} does not match its manifest entry")
        extra = set(provided) - {e.name for e in req.manifest.entries}
        if extra:
            raise ValidationError(f"blobs not named by the manifest: {sorted(extra)}")
        with self._lock:
            app_id = new_id()
            for name, data in provided.items():
                self._store.put("blob", f"{app_id}/{name}", data)
            rec = ApplicationRecord(
                app_id=app_id, owner_id=req.owner_id, manifest=req.manifest,
                thread_ids=(), created_at=time.time(), finished=False,
            )
            self._persist_app(rec)
            self._finlog[app_id] = []
            self._persist_finlog(app_id)
        self._event("app-created", app=app_id, owner=req.owner_id)
        return ApplicationCreated(app_id=app_id)

    def submit_threads(self, app_id: str, req: ThreadSubmit) -> ThreadsAccepted:
        if not req.threads:
            raise ValidationError("thread submission must contain at least one thread")
        for spec in req.threads:
            if not spec.task_kind:
                raise ValidationError("thread task_kind must be non-empty")
            if spec.priority is not None:
                check_priority(spec.priority)
        with self._lock:
            app = self._apps.get(app_id)
            if app is None:
                raise NotFoundError(f"application {app_id} not found")
            ids = []
            for spec in req.threads:
                rec = ThreadRecord(
                    thread_id=new_id(),
                    app_id=app_id,
                    seq=self._seq,
                    priority=DEFAULT_PRIORITY if spec.priority is None else spec.priority,
                    task_kind=spec.task_kind,
                    input=spec.input,
                )
                self._seq += 1
                self._persist_thread(rec)
                self._ready.enqueue(rec.thread_id, rec.priority, rec.seq)
                ids.append(rec.thread_id)
            self._persist_app(replace(app, thread_ids=app.thread_ids + tuple(ids), finished=False))
        self._event("threads-accepted", app=app_id, count=str(len(ids)))
        return ThreadsAccepted(thread_ids=tuple(ids))

    def thread_statuses(self, app_id: str) -> ThreadStatusList:
        with self._lock:
            app = self._require_app(app_id)
            rows = sorted((self._threads[tid] for tid in app.thread_ids), key=lambda r: r.seq)
            return ThreadStatusList(threads=tuple(
                ThreadStatus(
                    thread_id=r.thread_id, state=r.state, priority=r.priority,
                    has_result=r.result is not None, failure=r.failure,
                )
                for r in rows
            ))

    def thread_record(self, app_id: str, thread_id: str) -> ThreadRecord:
        with self._lock:
            self._require_app(app_id)
            rec = self._threads.get(thread_id)
            if rec is None or rec.app_id != app_id:
                raise NotFoundError(f"thread {thread_id} not found in application {app_id}")
            return rec

    def finished_records(self, app_id: str, cursor: int) -> FinishedResponse:
        if cursor < 0:
            raise ValidationError("cursor must be >= 0")
        with self._lock:
            self._require_app(app_id)
            order = self._finlog.get(app_id, [])
            records = tuple(self._threads[tid] for tid in order[cursor:])
            return FinishedResponse(records=records, next_cursor=len(order))

    def get_manifest(self, app_id: str) -> DependencyManifest:
        with self._lock:
            return self._require_app(app_id).manifest

    def get_blob(self, app_id: str, name: str) -> NamedBlob:
        with self._lock:
            app = self._require_app(app_id)
            entry = app.manifest.entry(name)
            if entry is None:
                raise NotFoundError(f"application {app_id} has no dependency {name!r}")
            data = self._store.get("blob", f"{app_id}/{name}")
            upstream = None if data is not None else self._upstream_app(app_id)
        if data is None and upstream is not None:
            parent_address, parent_app_id = upstream
            fetched = httpio.call(
                parent_address, "GET", f"/api/applications/{parent_app_id}/blobs/{name}"
            )
            if blob_hash(fetched.data) != entry.content_hash:
                raise ValidationError(f"upstream blob {name!r} failed its integrity check")
            with self._lock:
                self._store.put("blob", f"{app_id}/{name}", fetched.data)
            data = fetched.data
        if data is None:
            raise NotFoundError(f"blob {name!r} for application {app_id} is missing")
        return NamedBlob(name=name, data=data)

    def _require_app(self, app_id: str) -> ApplicationRecord:
        app = self._apps.get(app_id)
        if app is None:
            raise NotFoundError(f"application {app_id} not found")
        return app

    # ------------------------------------------------------------------
    # dispatch and completion

    def _claim_locked(self, executor_id: str) -> tuple[ThreadRecord, DependencyManifest] | None:
        """Pop the queue head and mark it scheduled to one executor."""
        thread_id = self._ready.dequeue()
        if thread_id is None:
            return None
        rec = self._threads[thread_id].transitioned(
            ThreadState.SCHEDULED, assigned_executor=executor_id
        )
        self._persist_thread(rec)
        self._assignments.setdefault(executor_id, set()).add(thread_id)
        return rec, self._apps[rec.app_id].manifest

    def _poll_claim(self, executor_id: str) -> tuple[ThreadRecord, DependencyManifest] | None:
        with self._lock:
            if executor_id not in self._executors:
                raise NotFoundError(f"executor {executor_id} not registered")
            self.heartbeat(executor_id)
            claimed = self._claim_locked(executor_id)
            if claimed is None:
                return None
            rec, manifest = claimed
            rec = rec.transitioned(ThreadState.EXECUTING)
            self._persist_thread(rec)
        self._event("dispatch", thread=rec.thread_id, executor=executor_id,
                    priority=str(rec.priority), mode="poll")
        return rec, manifest

    def poll(self, executor_id: str) -> PollResponse:
        claimed = self._poll_claim(executor_id)
        if claimed is None and self.config.parent_address \
                and not self.config.parent_dedicated:
            if self._pull_from_parent():
                claimed = self._poll_claim(executor_id)
        if claimed is None:
            return PollResponse()
        rec, manifest = claimed
        return PollResponse(thread=rec, manifest=manifest)

    def submit_result(self, executor_id: str, report: ResultReport) -> Ack:
        forward = None
        with self._lock:
            rec = self._threads.get(report.thread_id)
            if rec is None:
                raise NotFoundError(f"thread {report.thread_id} not known")
            if rec.state.terminal:
                log.warning("duplicate result for %s from %s ignored", rec.thread_id, executor_id)
                self._event("result-duplicate", thread=rec.thread_id, executor=executor_id)
                return Ack(ok=True, note="duplicate result ignored")
            if rec.assigned_executor != executor_id:
                log.warning(
                    "result for %s from non-assignee %s ignored (assignee %s)",
                    rec.thread_id, executor_id, rec.assigned_executor,
                )
                self._event("result-non-assignee", thread=rec.thread_id, executor=executor_id)
                return Ack(ok=True, note="not the assignee, result ignored")
            if rec.state is ThreadState.SCHEDULED:
                # Dedicated executors may finish before the push ack lands.
                rec = rec.transitioned(ThreadState.EXECUTING)
            if report.state is ThreadState.COMPLETED:
                rec = rec.transitioned(
                    ThreadState.COMPLETED, result=report.result, assigned_executor=None
                )
            else:
                rec = rec.transitioned(
                    ThreadState.FAILED, failure=report.failure, assigned_executor=None
                )
            self._persist_thread(rec)
            self._assignments.get(executor_id, set()).discard(rec.thread_id)
            self._finlog.setdefault(rec.app_id, []).append(rec.thread_id)
            self._persist_finlog(rec.app_id)
            self._maybe_finish_app(rec.app_id)
            raw = self._store.get("upstream", rec.thread_id)
            if raw is not None:
                forward = json.loads(raw)
        self._event("thread-finished", thread=rec.thread_id, state=rec.state.value,
                    executor=executor_id)
        if forward is not None:
            self._forward_result(rec.thread_id, forward, report)
        return Ack()

    def _maybe_finish_app(self, app_id: str) -> None:
        app = self._apps[app_id]
        if app.finished or not app.thread_ids:
            return
        if all(self._threads[tid].state.terminal for tid in app.thread_ids):
            self._persist_app(replace(app, finished=True))
            self._event("app-finished", app=app_id)

    def _requeue_locked(self, thread_id: str, why: str) -> None:
        rec = self._threads[thread_id]
        rec = rec.transitioned(ThreadState.READY, assigned_executor=None)
        self._persist_thread(rec)
        try:
            self._ready.enqueue(rec.thread_id, rec.priority, rec.seq)
        except DuplicateError:  # pragma: no cover - requeue is idempotent
            pass
        self._event("requeued", thread=thread_id, why=why)

    # ------------------------------------------------------------------
    # dedicated dispatch loop

    def _dispatch_once(self) -> int:
        pushed = 0
        with self._lock:
            candidates = [
                rec for rec in self._executors.values()
                if rec.dedicated and rec.executor_id not in self._suspect
                and len(self._assignments.get(rec.executor_id, ())) < rec.slots
            ]
        for executor in candidates:
            while True:
                with self._lock:
                    if len(self._assignments.get(executor.executor_id, ())) >= executor.slots:
                        break
                    claimed = self._claim_locked(executor.executor_id)
                if claimed is None:
                    break
                rec, manifest = claimed
                if self._push_to(executor, rec, manifest):
                    pushed += 1
                else:
                    break
        return pushed

    def _push_to(self, executor: ExecutorRecord, rec: ThreadRecord,
                 manifest: DependencyManifest) -> bool:
        try:
            ack: PushAck = httpio.call(
                executor.callback_address, "POST", "/api/execute",
                ExecutePush(thread=rec.transitioned(ThreadState.EXECUTING), manifest=manifest),
            )
        except DeskgridError as exc:
            with self._lock:
                self._suspect.add(executor.executor_id)
                self._assignments[executor.executor_id].discard(rec.thread_id)
                self._requeue_locked(rec.thread_id, why="push-unreachable")
            log.warning("push to %s failed: %s", executor.executor_id, exc)
            return False
        with self._lock:
            current = self._threads[rec.thread_id]
            if ack.accepted:
                if current.state is ThreadState.SCHEDULED:
                    self._persist_thread(current.transitioned(ThreadState.EXECUTING))
                self._event("dispatch", thread=rec.thread_id, executor=executor.executor_id,
                            priority=str(rec.priority), mode="push")
                return True
            self._assignments[executor.executor_id].discard(rec.thread_id)
            if current.state is ThreadState.SCHEDULED:
                self._requeue_locked(rec.thread_id, why=f"push-rejected:{ack.reason}")
            return False

    # ------------------------------------------------------------------
    # heartbeat reaper

    def _reap_once(self) -> None:
        cutoff = time.time() - self.config.heartbeat_timeout_s
        with self._lock:
            dead = [eid for eid, rec in self._executors.items() if rec.last_heartbeat < cutoff]
            for eid in dead:
                stranded = sorted(
                    self._assignments.get(eid, set()),
                    key=lambda tid: self._threads[tid].seq,
                )
                for tid in stranded:
                    self._requeue_locked(tid, why=f"executor-lost:{eid}")
                self._assignments.pop(eid, None)
                self._executors.pop(eid, None)
                self._suspect.discard(eid)
                self._event("executor-reaped", executor=eid, requeued=str(len(stranded)))
                log.warning("executor %s missed heartbeats; requeued %d threads", eid, len(stranded))

    # ------------------------------------------------------------------
    # federation (child side)

    def _upstream_app(self, app_id: str) -> tuple[str, str] | None:
        raw = self._store.get("upapp", app_id)
        if raw is None:
            return None
        obj = json.loads(raw)
        return obj["parent_address"], obj["parent_app_id"]

    def _mirror_app_locked(self, parent_address: str, parent_app_id: str,
                           manifest: DependencyManifest) -> str:
        key = f"{parent_address}|{parent_app_id}"
        raw = self._store.get("upmap", key)
        if raw is not None:
            return raw.decode("ascii")
        app_id = new_id()
        rec = ApplicationRecord(
            app_id=app_id, owner_id=UPSTREAM_OWNER, manifest=manifest,
            thread_ids=(), created_at=time.time(), finished=False,
        )
        self._persist_app(rec)
        self._finlog[app_id] = []
        self._persist_finlog(app_id)
        self._store.put("upmap", key, app_id.encode("ascii"))
        self._store.put("upapp", app_id, json.dumps(
            {"parent_address": parent_address, "parent_app_id": parent_app_id}
        ).encode("ascii"))
        return app_id

    def intake_upstream(self, thread: ThreadRecord, manifest: DependencyManifest,
                        parent_address: str) -> str:
        """Adopt a thread handed down by the parent as a local thread."""
        with self._lock:
            local_app = self._mirror_app_locked(parent_address, thread.app_id, manifest)
            rec = ThreadRecord(
                thread_id=new_id(), app_id=local_app, seq=self._seq,
                priority=decay_priority(thread.priority),
                task_kind=thread.task_kind, input=thread.input,
            )
            self._seq += 1
            self._persist_thread(rec)
            self._store.put("upstream", rec.thread_id, json.dumps(
                {"parent_address": parent_address, "parent_thread_id": thread.thread_id}
            ).encode("ascii"))
            app = self._apps[local_app]
            self._persist_app(replace(app, thread_ids=app.thread_ids + (rec.thread_id,),
                                      finished=False))
            self._ready.enqueue(rec.thread_id, rec.priority, rec.seq)
        self._event("upstream-intake", thread=rec.thread_id,
                    parent_thread=thread.thread_id, priority=str(rec.priority))
        return rec.thread_id

    def _pull_from_parent(self) -> bool:
        """Ask the parent for one thread, but only while the queue is empty."""
        parent = self.config.parent_address
        with self._lock:
            queue_len = len(self._ready)
            if queue_len:
                return False
            # Logged under the lock: an upstream request is only ever made
            # with the local queue observed empty at the decision point.
            self._event("parent-pull-attempt", queue_len=str(queue_len))
        try:
            self._ensure_parent_registration()
            resp: PollResponse = httpio.call(
                parent, "POST", f"/api/executors/{self.identity}/poll"
            )
        except NotFoundError:
            self._parent_registered = False
            return False
        except DeskgridError as exc:
            log.debug("parent poll failed: %s", exc)
            return False
        if resp.thread is None:
            return False
        self.intake_upstream(resp.thread, resp.manifest, parent)
        return True

    def accept_push(self, push: ExecutePush) -> PushAck:
        """Executor surface: a configured parent may push work straight in."""
        if not self.config.parent_address:
            return PushAck(accepted=False, reason="no upstream configured")
        self.intake_upstream(push.thread, push.manifest, self.config.parent_address)
        return PushAck(accepted=True)

    def _ensure_parent_registration(self) -> None:
        if self._parent_registered:
            return
        callback = self.address if self.config.parent_dedicated else None
        httpio.call(
            self.config.parent_address, "POST", "/api/executors",
            RegisterRequest(
                dedicated=self.config.parent_dedicated,
                slots=self.config.parent_slots,
                is_manager=True,
                callback_address=callback,
                identity=self.identity,
            ),
        )
        self._parent_registered = True
        self._event("parent-registered", parent=self.config.parent_address)

    def _forward_result(self, local_thread_id: str, link: dict, report: ResultReport) -> None:
        upstream_report = ResultReport(
            thread_id=link["parent_thread_id"], state=report.state,
            result=report.result, failure=report.failure, duration_s=report.duration_s,
        )
        try:
            httpio.call(
                link["parent_address"], "POST",
                f"/api/executors/{self.identity}/results", upstream_report,
            )
        except UnreachableError:
            with self._lock:
                self._store.put("fwdbuf", local_thread_id, json.dumps({
                    "parent_address": link["parent_address"],
                    "report": encode_envelope(upstream_report).decode("utf-8"),
                }).encode("utf-8"))
            log.warning("parent unreachable; buffered result for %s", local_thread_id)
        except NotFoundError:
            pass  # parent no longer tracks it; nothing to deliver
        except DeskgridError as exc:
            log.warning("parent refused forwarded result for %s: %s", local_thread_id, exc)
        else:
            with self._lock:
                self._store.delete("fwdbuf", local_thread_id)

    def _flush_forward_buffer(self) -> None:
        pending = list(self._store.items("fwdbuf"))
        for key, raw in pending:
            obj = json.loads(raw)
            report = decode_envelope(obj["report"].encode("utf-8"))
            try:
                httpio.call(
                    obj["parent_address"], "POST",
                    f"/api/executors/{self.identity}/results", report,
                )
            except UnreachableError:
                return
            except NotFoundError:
                pass
            with self._lock:
                self._store.delete("fwdbuf", key)

    def _parent_tick(self) -> None:
        try:
            self._ensure_parent_registration()
            httpio.call(
                self.config.parent_address, "POST",
                f"/api/executors/{self.identity}/heartbeat",
            )
        except NotFoundError:
            self._parent_registered = False
        except DeskgridError as exc:
            log.debug("parent heartbeat failed: %s", exc)
        self._flush_forward_buffer()

    # ------------------------------------------------------------------
    # lifecycle

    @property
    def address(self) -> str:
        if self._server is None:
            raise DeskgridError("manager not started")
        return self._server.address

    def start(self) -> "Manager":
        self._server = httpio.ApiServer(self._routes(), host=self.config.host,
                                        port=self.config.port, name="manager").start()
        self._spawn(self._reaper_loop, "manager-reaper")
        self._spawn(self._dispatch_loop, "manager-dispatch")
        if self.config.parent_address:
            self._spawn(self._parent_loop, "manager-parent")
        log.info("manager %s listening on %s", self.identity, self.address)
        return self

    def stop(self) -> None:
        self._stop.set()
        for loop in self._loops:
            loop.join(timeout=5.0)
        if self._server is not None:
            self._server.stop()
            self._server = None
        self._store.close()

    def _spawn(self, target, name: str) -> None:
        thread = threading.Thread(target=target, name=name, daemon=True)
        thread.start()
        self._loops.append(thread)

    def _reaper_loop(self) -> None:
        while not self._stop.wait(self.config.reaper_interval_s):
            try:
                self._reap_once()
            except Exception:  # pragma: no cover - keep the loop alive
                log.exception("reaper tick failed")

    def _dispatch_loop(self) -> None:
        while not self._stop.wait(self.config.dispatch_interval_s):
            try:
                self._dispatch_once()
            except Exception:  # pragma: no cover - keep the loop alive
                log.exception("dispatch tick failed")

    def _parent_loop(self) -> None:
        while not self._stop.wait(self.config.heartbeat_interval_s):
            try:
                self._parent_tick()
            except Exception:  # pragma: no cover - keep the loop alive
                log.exception("parent tick failed")

    def __enter__(self) -> "Manager":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()

    # ------------------------------------------------------------------
    # HTTP routes

    @staticmethod
    def _cursor(params: dict[str, str]) -> int:
        raw = params.get("cursor", "0")
        try:
            return int(raw)
        except ValueError:
            raise ValidationError(f"cursor {raw!r} is not an integer") from None

    def _routes(self) -> list[tuple[str, str, httpio.RouteFn]]:
        return [
            ("GET", "/api/ping", lambda p, m: Ack()),
            ("POST", "/api/executors", lambda p, m: self.register_executor(m)),
            ("POST", "/api/executors/{eid}/heartbeat", lambda p, m: self.heartbeat(p["eid"])),
            ("POST", "/api/executors/{eid}/poll", lambda p, m: self.poll(p["eid"])),
            ("POST", "/api/executors/{eid}/results",
             lambda p, m: self.submit_result(p["eid"], m)),
            ("GET", "/api/executors", lambda p, m: self.registry_view()),
            ("POST", "/api/applications", lambda p, m: self.submit_application(m)),
            ("POST", "/api/applications/{app_id}/threads",
             lambda p, m: self.submit_threads(p["app_id"], m)),
            ("GET", "/api/applications/{app_id}/threads",
             lambda p, m: self.thread_statuses(p["app_id"])),
            ("GET", "/api/applications/{app_id}/threads/{tid}",
             lambda p, m: self.thread_record(p["app_id"], p["tid"])),
            ("GET", "/api/applications/{app_id}/finished",
             lambda p, m: self.finished_records(p["app_id"], self._cursor(p))),
            ("GET", "/api/applications/{app_id}/manifest",
             lambda p, m: self.get_manifest(p["app_id"])),
            ("GET", "/api/applications/{app_id}/blobs/{name}",
             lambda p, m: self.get_blob(p["app_id"], p["name"])),
            ("GET", "/api/debug/events",
             lambda p, m: self.events_since(self._cursor(p))),
            ("POST", "/api/execute", lambda p, m: self.accept_push(m)),
        ]
