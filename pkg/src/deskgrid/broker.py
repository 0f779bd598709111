"""Broker: scatter an expanded plan across several job gateways.

Each endpoint is a gateway with a capacity cap and an ``os_tag``; the
broker renders every job's commands per endpoint (so ``$OS`` picks the
endpoint's platform variant), keeps each endpoint filled up to its cap,
and drains completions in a single polling loop. A failed job is
retried on a different endpoint, three attempts in total; an endpoint
that stops answering has its in-flight jobs requeued without charging
them an attempt. Every completion appends a row to a cumulative CSV
report: ``time_s,endpoint,cumulative_completed``.
"""

from __future__ import annotations

import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field

from deskgrid import gateway as gwclient
from deskgrid.errors import DeskgridError, UnreachableError, ValidationError
from deskgrid.model import ThreadState
from deskgrid.plan import (
    PlanDocument,
    PlanError,
    SweepPoint,
    output_destinations,
    to_jobspecs,
)
from deskgrid.wire import JobSpec

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Endpoint:
    name: str
    address: str
    os_tag: str
    max_in_flight: int = 2


def load_endpoints(path: str) -> list[Endpoint]:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    rows = doc.get("endpoint")
    if not isinstance(rows, list) or not rows:
        raise ValidationError(f"{path}: expected at least one [[endpoint]] table")
    endpoints = []
    for i, row in enumerate(rows):
        try:
            endpoints.append(Endpoint(
                name=str(row["name"]), address=str(row["address"]),
                os_tag=str(row["os_tag"]),
                max_in_flight=int(row.get("max_in_flight", 2)),
            ))
        except KeyError as exc:
            raise ValidationError(f"{path}: endpoint {i} missing key {exc}") from None
    names = [e.name for e in endpoints]
    if len(set(names)) != len(names):
        raise ValidationError(f"{path}: endpoint names must be unique")
    return endpoints


@dataclass
class _Work:
    point: SweepPoint
    attempts: int = 0
    tried: set[str] = field(default_factory=set)
    last_endpoint: str | None = None

    @property
    def jobname(self) -> str:
        return self.point.jobname


@dataclass
class _Flight:
    work: _Work
    task_id: str
    endpoint: Endpoint
    outputs: dict[str, str]  # remote name -> local destination


@dataclass
class BrokerOutcome:
    completed: dict[str, str]            # jobname -> endpoint name
    failed: dict[str, str]               # jobname -> reason
    endpoint_counts: dict[str, int]      # endpoint name -> completions
    rows: list[tuple[float, str, int]]   # (time_s, endpoint, cumulative)


class Broker:
    def __init__(self, doc: PlanDocument, points: list[SweepPoint], endpoints: list[Endpoint],
                 plan_dir: str, out_dir: str, report_path: str | None = None,
                 submitted_by: str = "broker", max_attempts: int = 3,
                 poll_interval_s: float = 0.05) -> None:
        if not endpoints:
            raise ValidationError("broker needs at least one endpoint")
        self._doc = doc
        self._endpoints = list(endpoints)
        self._plan_dir = plan_dir
        self._out_dir = out_dir
        self._report_path = report_path
        self._submitted_by = submitted_by
        self._max_attempts = max_attempts
        self._poll_interval_s = poll_interval_s
        self._pending: deque[_Work] = deque(_Work(point=p) for p in points)
        self._flights: list[_Flight] = []
        self._down: set[str] = set()
        self._file_cache: dict[str, bytes] = {}
        self._outcome = BrokerOutcome(
            completed={}, failed={},
            endpoint_counts={e.name: 0 for e in endpoints}, rows=[],
        )
        self._started = 0.0

    # ------------------------------------------------------------------
    # job spec construction

    def _read_plan_file(self, name: str) -> bytes:
        data = self._file_cache.get(name)
        if data is None:
            path = os.path.join(self._plan_dir, name)
            if not os.path.realpath(path).startswith(os.path.realpath(self._plan_dir) + os.sep):
                raise PlanError(f"plan file {name!r} escapes the plan directory")
            try:
                with open(path, "rb") as fh:
                    data = fh.read()
            except FileNotFoundError:
                raise PlanError(f"plan file {name!r} not found in {self._plan_dir}") from None
            self._file_cache[name] = data
        return data

    def _build_spec(self, work: _Work, endpoint: Endpoint
                    ) -> tuple[JobSpec, dict[str, str]]:
        variables = {"OS": endpoint.os_tag}
        (spec,) = to_jobspecs(self._doc, [work.point], self._plan_dir,
                              variables, file_reader=self._read_plan_file)
        return spec, output_destinations(self._doc, work.point, variables)

    # ------------------------------------------------------------------
    # dispatch and harvest

    def _pick_endpoint(self, work: _Work, free: dict[str, int]) -> Endpoint | None:
        usable = [e for e in self._endpoints
                  if e.name not in self._down and free.get(e.name, 0) > 0]
        if not usable:
            return None
        fresh = [e for e in usable if e.name not in work.tried]
        if fresh:
            return fresh[0]
        not_last = [e for e in usable if e.name != work.last_endpoint]
        return (not_last or usable)[0]

    def _dispatch(self) -> None:
        free = {
            e.name: e.max_in_flight - sum(1 for f in self._flights if f.endpoint.name == e.name)
            for e in self._endpoints
        }
        skipped: list[_Work] = []
        while self._pending:
            work = self._pending.popleft()
            endpoint = self._pick_endpoint(work, free)
            if endpoint is None:
                skipped.append(work)
                if all(v <= 0 for name, v in free.items() if name not in self._down):
                    break
                continue
            try:
                spec, outputs = self._build_spec(work, endpoint)
                task_id = gwclient.submit_jobs(endpoint.address, self._submitted_by, [spec])
            except UnreachableError:
                self._down.add(endpoint.name)
                skipped.append(work)
                continue
            except (PlanError, DeskgridError) as exc:
                self._outcome.failed[work.jobname] = str(exc)
                log.warning("job %s undispatchable: %s", work.jobname, exc)
                continue
            free[endpoint.name] -= 1
            work.attempts += 1
            work.tried.add(endpoint.name)
            work.last_endpoint = endpoint.name
            self._flights.append(_Flight(work=work, task_id=task_id,
                                         endpoint=endpoint, outputs=outputs))
        self._pending.extendleft(reversed(skipped))

    def _record_completion(self, flight: _Flight) -> None:
        name = flight.endpoint.name
        self._outcome.completed[flight.work.jobname] = name
        self._outcome.endpoint_counts[name] += 1
        self._outcome.rows.append(
            (time.monotonic() - self._started, name, len(self._outcome.completed))
        )

    def _harvest_outputs(self, flight: _Flight) -> None:
        if not flight.outputs:
            return
        result = gwclient.job_result(flight.endpoint.address, flight.task_id,
                                     flight.work.jobname)
        blobs = {blob.name: blob.data for blob in result.output_files}
        for remote, local in flight.outputs.items():
            data = blobs.get(remote)
            if data is None:
                raise DeskgridError(f"gateway returned no output {remote!r}")
            dest = os.path.join(self._out_dir, local)
            os.makedirs(os.path.dirname(dest) or self._out_dir, exist_ok=True)
            with open(dest, "wb") as fh:
                fh.write(data)

    def _fail_or_retry(self, flight: _Flight, reason: str) -> None:
        work = flight.work
        if work.attempts >= self._max_attempts:
            self._outcome.failed[work.jobname] = reason
            log.warning("job %s failed permanently after %d attempts: %s",
                        work.jobname, work.attempts, reason)
        else:
            self._pending.append(work)

    def _poll_flights(self) -> None:
        still: list[_Flight] = []
        for flight in self._flights:
            try:
                status = gwclient.task_status(flight.endpoint.address, flight.task_id)
            except UnreachableError:
                self._down.add(flight.endpoint.name)
                # An endpoint dying is not the job's fault: refund the attempt.
                flight.work.attempts -= 1
                flight.work.tried.discard(flight.endpoint.name)
                self._pending.append(flight.work)
                continue
            except DeskgridError as exc:
                self._fail_or_retry(flight, f"status query failed: {exc}")
                continue
            job = status.jobs[0]
            if job.state is ThreadState.COMPLETED:
                try:
                    self._harvest_outputs(flight)
                except DeskgridError as exc:
                    self._fail_or_retry(flight, f"output harvest failed: {exc}")
                    continue
                self._record_completion(flight)
            elif job.state is ThreadState.FAILED:
                self._fail_or_retry(flight, f"exit_code={job.exit_code}")
            else:
                still.append(flight)
        self._flights = still

    def _revive_endpoints(self) -> None:
        for endpoint in self._endpoints:
            if endpoint.name in self._down:
                try:
                    gwclient.httpio.call(endpoint.address, "GET", "/api/ping", timeout=1.0)
                except DeskgridError:
                    continue
                self._down.discard(endpoint.name)

    # ------------------------------------------------------------------

    def run(self, timeout_s: float = 300.0) -> BrokerOutcome:
        self._started = time.monotonic()
        deadline = self._started + timeout_s
        last_revive = 0.0
        try:
            while self._pending or self._flights:
                if time.monotonic() >= deadline:
                    for flight in self._flights:
                        self._outcome.failed[flight.work.jobname] = "broker timeout"
                    for work in self._pending:
                        self._outcome.failed[work.jobname] = "broker timeout"
                    log.error("broker timed out with %d jobs unfinished",
                              len(self._flights) + len(self._pending))
                    break
                if time.monotonic() - last_revive >= 1.0:
                    self._revive_endpoints()
                    last_revive = time.monotonic()
                self._dispatch()
                time.sleep(self._poll_interval_s)
                self._poll_flights()
        finally:
            self._write_report()
        return self._outcome

    def _write_report(self) -> None:
        if self._report_path is None:
            return
        os.makedirs(os.path.dirname(self._report_path) or ".", exist_ok=True)
        with open(self._report_path, "w", encoding="ascii") as fh:
            fh.write("time_s,endpoint,cumulative_completed\n")
            for t, endpoint, cumulative in self._outcome.rows:
                fh.write(f"{t:.3f},{endpoint},{cumulative}\n")
