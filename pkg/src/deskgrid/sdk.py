"""Client SDK for application owners.

``GridClient`` talks to a manager over HTTP: create an application with
its dependency blobs, add threads, and wait for completion. The waiter
follows the manager's durable finish log with a cursor, so it rides out
manager restarts without missing or double-counting a record.

Two ready-made applications live here too: an integer-product demo and
a pi calculator that splits the digit range into fixed-size slices, one
grid thread each.
"""

from __future__ import annotations

import json
import time
from typing import Iterable

from deskgrid import httpio
from deskgrid.errors import DeskgridError, UnreachableError
from deskgrid.model import DependencyManifest, ThreadRecord, ThreadState
from deskgrid.wire import (
    ApplicationSubmit,
    NamedBlob,
    ThreadSpec,
    ThreadStatusList,
    ThreadSubmit,
)


class ApplicationFailed(DeskgridError):
    code = "app-failed"


class GridClient:
    def __init__(self, manager_address: str, owner_id: str = "owner",
                 timeout: float = 10.0) -> None:
        self.manager_address = manager_address
        self.owner_id = owner_id
        self.timeout = timeout

    def _call(self, method: str, path: str, message=None):
        return httpio.call(self.manager_address, method, path, message,
                           timeout=self.timeout)

    def new_application(self, dependencies: dict[str, bytes] | None = None) -> "Application":
        deps = dependencies or {}
        manifest = DependencyManifest.for_blobs(deps)
        blobs = tuple(NamedBlob(name=n, data=d) for n, d in sorted(deps.items()))
        created = self._call("POST", "/api/applications", ApplicationSubmit(
            owner_id=self.owner_id, manifest=manifest, blobs=blobs,
        ))
        return Application(self, created.app_id)


class Application:
    def __init__(self, client: GridClient, app_id: str) -> None:
        self._client = client
        self.app_id = app_id
        self.thread_ids: list[str] = []
        self._cursor = 0
        self._finished: dict[str, ThreadRecord] = {}

    def add_thread(self, task_kind: str, input: bytes, priority: int | None = None) -> str:
        return self.add_threads([ThreadSpec(task_kind=task_kind, input=input,
                                            priority=priority)])[0]

    def add_threads(self, specs: Iterable[ThreadSpec]) -> list[str]:
        accepted = self._client._call(
            "POST", f"/api/applications/{self.app_id}/threads",
            ThreadSubmit(threads=tuple(specs)),
        )
        ids = list(accepted.thread_ids)
        self.thread_ids.extend(ids)
        return ids

    def statuses(self) -> ThreadStatusList:
        return self._client._call("GET", f"/api/applications/{self.app_id}/threads")

    def thread(self, thread_id: str) -> ThreadRecord:
        return self._client._call(
            "GET", f"/api/applications/{self.app_id}/threads/{thread_id}"
        )

    def wait(self, timeout: float = 60.0, poll_interval: float = 0.05) -> dict[str, ThreadRecord]:
        """Block until every submitted thread is terminal; manager outages tolerated."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                resp = self._client._call(
                    "GET", f"/api/applications/{self.app_id}/finished?cursor={self._cursor}"
                )
            except UnreachableError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.2)
                continue
            self._cursor = resp.next_cursor
            for rec in resp.records:
                self._finished[rec.thread_id] = rec
            if self.thread_ids and all(tid in self._finished for tid in self.thread_ids):
                return dict(self._finished)
            if time.monotonic() >= deadline:
                missing = [tid for tid in self.thread_ids if tid not in self._finished]
                raise TimeoutError(
                    f"application {self.app_id}: {len(missing)} of "
                    f"{len(self.thread_ids)} threads unfinished after {timeout:.0f}s"
                )
            time.sleep(poll_interval)

    def results(self, timeout: float = 60.0) -> dict[str, bytes]:
        """Wait, then return thread_id -> result; raise if anything failed."""
        finished = self.wait(timeout=timeout)
        failures = {tid: rec.failure for tid, rec in finished.items()
                    if rec.state is ThreadState.FAILED}
        if failures:
            sample = "; ".join(f"{tid[:8]}: {msg}" for tid, msg in list(failures.items())[:3])
            raise ApplicationFailed(f"{len(failures)} threads failed ({sample})")
        return {tid: rec.result for tid, rec in finished.items()
                if tid in set(self.thread_ids)}


# ---------------------------------------------------------------------------
# Demo applications.


def run_multiplier_demo(manager_address: str, pairs: list[tuple[int, int]] | None = None,
                        owner_id: str = "demo", timeout: float = 60.0) -> list[int]:
    """Ten products of consecutive integers unless given explicit pairs."""
    if pairs is None:
        pairs = [(i, i + 1) for i in range(10)]
    client = GridClient(manager_address, owner_id=owner_id)
    app = client.new_application()
    ids = app.add_threads([
        ThreadSpec(task_kind="multiplier",
                   input=json.dumps({"a": a, "b": b}).encode("ascii"))
        for a, b in pairs
    ])
    results = app.results(timeout=timeout)
    return [int(results[tid].decode("ascii")) for tid in ids]


def pi_slice_bounds(digits: int, slice_size: int) -> list[tuple[int, int]]:
    """(start, count) pairs covering fractional digits 1..digits."""
    if digits < 1 or slice_size < 1:
        raise ValueError("digits and slice_size must be >= 1")
    bounds = []
    start = 1
    while start <= digits:
        count = min(slice_size, digits - start + 1)
        bounds.append((start, count))
        start += count
    return bounds


def run_pi_application(manager_address: str, digits: int, slice_size: int = 50,
                       work_scale: int = 1, owner_id: str = "pi",
                       timeout: float = 300.0) -> str:
    """Compute the first ``digits`` fractional digits of pi on the grid."""
    client = GridClient(manager_address, owner_id=owner_id)
    app = client.new_application()
    bounds = pi_slice_bounds(digits, slice_size)
    ids = app.add_threads([
        ThreadSpec(task_kind="pi-slice", input=json.dumps(
            {"start": start, "count": count, "work_scale": work_scale}
        ).encode("ascii"))
        for start, count in bounds
    ])
    results = app.results(timeout=timeout)
    pieces = []
    for (start, count), tid in zip(bounds, ids):
        piece = results[tid].decode("ascii")
        if len(piece) != count:
            raise ApplicationFailed(
                f"slice at digit {start} returned {len(piece)} digits, wanted {count}"
            )
        pieces.append(piece)
    return "".join(pieces)
