"""Job gateway: submit subprocess jobs to the grid from anywhere HTTP reaches.

A thin wrapper over a manager. Each submitted task becomes one grid
application; each job in it becomes one thread running the built-in
``subprocess`` task, with the whole job spec (program, args, input
files, declared outputs) travelling inside the thread input. The
task-to-thread mapping is journaled before the submission is
acknowledged, so status and output queries survive a gateway restart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from deskgrid import httpio
from deskgrid.errors import ConflictError, DeskgridError, NotFoundError, ValidationError
from deskgrid.model import ThreadState, new_id
from deskgrid.sdk import GridClient
from deskgrid.store import JournalStore
from deskgrid.wire import (
    Ack,
    JobStatus,
    JobThreadLink,
    SubprocessResult,
    TaskCreated,
    TaskMapping,
    TaskStatusResponse,
    TaskSubmission,
    ThreadSpec,
    decode_envelope,
    encode_envelope,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GatewayConfig:
    manager_address: str
    store_path: str
    host: str = "127.0.0.1"
    port: int = 0


class Gateway:
    def __init__(self, config: GatewayConfig) -> None:
        self.config = config
        self._store = JournalStore(config.store_path)
        self._tasks: dict[str, TaskMapping] = {}
        for task_id, raw in self._store.items("task"):
            self._tasks[task_id] = decode_envelope(raw)
        self._server: httpio.ApiServer | None = None

    @property
    def address(self) -> str:
        if self._server is None:
            raise DeskgridError("gateway not started")
        return self._server.address

    def start(self) -> "Gateway":
        self._server = httpio.ApiServer(
            [
                ("GET", "/api/ping", lambda p, m: Ack()),
                ("POST", "/api/tasks", lambda p, m: self.submit_task(m)),
                ("GET", "/api/tasks/{task_id}", lambda p, m: self.task_status(p["task_id"])),
                ("GET", "/api/tasks/{task_id}/jobs/{job_name}/result",
                 lambda p, m: self.job_result(p["task_id"], p["job_name"])),
            ],
            host=self.config.host, port=self.config.port, name="gateway",
        ).start()
        log.info("gateway listening on %s (manager %s)", self.address,
                 self.config.manager_address)
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.stop()
            self._server = None
        self._store.close()

    def __enter__(self) -> "Gateway":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()

    # ------------------------------------------------------------------

    def submit_task(self, submission: TaskSubmission) -> TaskCreated:
        if not submission.jobs:
            raise ValidationError("task submission must contain at least one job")
        names = [job.job_name for job in submission.jobs]
        if len(set(names)) != len(names):
            raise ValidationError("job names within a task must be unique")
        if not submission.submitted_by:
            raise ValidationError("submitted_by must be non-empty")
        client = GridClient(self.config.manager_address,
                            owner_id=f"gateway:{submission.submitted_by}")
        app = client.new_application()
        thread_ids = app.add_threads([
            ThreadSpec(task_kind="subprocess", input=encode_envelope(job))
            for job in submission.jobs
        ])
        task_id = new_id()
        mapping = TaskMapping(
            task_id=task_id, app_id=app.app_id, submitted_by=submission.submitted_by,
            links=tuple(
                JobThreadLink(job_name=name, thread_id=tid)
                for name, tid in zip(names, thread_ids)
            ),
        )
        self._store.put("task", task_id, encode_envelope(mapping))
        self._tasks[task_id] = mapping
        log.info("task %s: %d jobs submitted as application %s",
                 task_id, len(names), app.app_id)
        return TaskCreated(task_id=task_id)

    def _mapping(self, task_id: str) -> TaskMapping:
        mapping = self._tasks.get(task_id)
        if mapping is None:
            raise NotFoundError(f"task {task_id} not found")
        return mapping

    @staticmethod
    def _exit_code_from_failure(failure: str | None) -> int | None:
        if failure and failure.startswith("exit status "):
            head = failure[len("exit status "):].split(":", 1)[0]
            try:
                return int(head)
            except ValueError:
                return None
        return None

    def task_status(self, task_id: str) -> TaskStatusResponse:
        mapping = self._mapping(task_id)
        statuses = httpio.call(
            self.config.manager_address, "GET",
            f"/api/applications/{mapping.app_id}/threads",
        )
        by_thread = {row.thread_id: row for row in statuses.threads}
        jobs = []
        for link in sorted(mapping.links, key=lambda l: l.job_name):
            row = by_thread.get(link.thread_id)
            if row is None:
                raise NotFoundError(f"thread for job {link.job_name!r} disappeared")
            if row.state is ThreadState.COMPLETED:
                exit_code: int | None = 0
            else:
                exit_code = self._exit_code_from_failure(row.failure)
            jobs.append(JobStatus(
                job_name=link.job_name, state=row.state, exit_code=exit_code,
                outputs_ready=row.state is ThreadState.COMPLETED,
            ))
        return TaskStatusResponse(jobs=tuple(jobs))

    def job_result(self, task_id: str, job_name: str) -> SubprocessResult:
        mapping = self._mapping(task_id)
        link = next((l for l in mapping.links if l.job_name == job_name), None)
        if link is None:
            raise NotFoundError(f"task {task_id} has no job {job_name!r}")
        record = httpio.call(
            self.config.manager_address, "GET",
            f"/api/applications/{mapping.app_id}/threads/{link.thread_id}",
        )
        if record.state is ThreadState.FAILED:
            raise ConflictError(f"job {job_name!r} failed: {record.failure}")
        if record.state is not ThreadState.COMPLETED:
            raise ConflictError(f"job {job_name!r} has not finished yet")
        result = decode_envelope(record.result)
        if not isinstance(result, SubprocessResult):
            raise ConflictError(f"job {job_name!r} returned an unexpected payload")
        return result


# ---------------------------------------------------------------------------
# Client-side helpers, used by the broker and tests.


def submit_jobs(gateway_address: str, submitted_by: str, jobs, timeout: float = 10.0) -> str:
    created = httpio.call(gateway_address, "POST", "/api/tasks",
                          TaskSubmission(submitted_by=submitted_by, jobs=tuple(jobs)),
                          timeout=timeout)
    return created.task_id


def task_status(gateway_address: str, task_id: str, timeout: float = 10.0) -> TaskStatusResponse:
    return httpio.call(gateway_address, "GET", f"/api/tasks/{task_id}", timeout=timeout)


def job_result(gateway_address: str, task_id: str, job_name: str,
               timeout: float = 10.0) -> SubprocessResult:
    return httpio.call(gateway_address, "GET",
                       f"/api/tasks/{task_id}/jobs/{job_name}/result", timeout=timeout)
