"""Canonical message encoding for every HTTP surface.

One self-describing envelope: UTF-8 JSON ``{"kind": ..., "body": {...}}``.
Byte payloads travel base64, enums by value, nested records as objects.
``decode_envelope`` raises :class:`EnvelopeError` (naming the offending
field) on any malformed input and nothing else, no matter how mangled the
bytes are.
"""

from __future__ import annotations

import base64
import json
import types
import typing
from dataclasses import dataclass, fields, is_dataclass
from enum import Enum
from typing import Any, Union, get_args, get_origin, get_type_hints

from deskgrid.errors import DeskgridError, EnvelopeError, ValidationError
from deskgrid.model import (
    ApplicationRecord,
    DependencyEntry,
    DependencyManifest,
    ExecutorRecord,
    ThreadRecord,
    ThreadState,
)

_KIND_TO_TYPE: dict[str, type] = {}
_TYPE_TO_KIND: dict[type, str] = {}
_HINTS_CACHE: dict[type, dict[str, Any]] = {}


def register_kind(kind: str, cls: type) -> None:
    if kind in _KIND_TO_TYPE:
        raise ValidationError(f"message kind {kind!r} already registered")
    _KIND_TO_TYPE[kind] = cls
    _TYPE_TO_KIND[cls] = kind


def wire_message(kind: str):
    """Class decorator registering a dataclass as a top-level message kind."""

    def deco(cls: type) -> type:
        register_kind(kind, cls)
        return cls

    return deco


def registered_kinds() -> dict[str, type]:
    return dict(_KIND_TO_TYPE)


def _hints(cls: type) -> dict[str, Any]:
    cached = _HINTS_CACHE.get(cls)
    if cached is None:
        cached = get_type_hints(cls)
        _HINTS_CACHE[cls] = cached
    return cached


def _is_optional(tp: Any) -> Any | None:
    """Return the inner type of Optional[X] / X|None, else None."""
    origin = get_origin(tp)
    if origin is Union or origin is types.UnionType:
        args = [a for a in get_args(tp) if a is not type(None)]
        if len(args) == 1 and type(None) in get_args(tp):
            return args[0]
    return None


def _encode_value(value: Any, tp: Any, path: str) -> Any:
    inner = _is_optional(tp)
    if inner is not None:
        return None if value is None else _encode_value(value, inner, path)
    if tp is bytes:
        return base64.b64encode(value).decode("ascii")
    if tp in (str, int, float, bool):
        return value
    if isinstance(tp, type) and issubclass(tp, Enum):
        return value.value
    origin = get_origin(tp)
    if origin in (tuple, list):
        item_tp = get_args(tp)[0]
        return [_encode_value(v, item_tp, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        _, val_tp = get_args(tp)
        return {k: _encode_value(v, val_tp, f"{path}.{k}") for k, v in value.items()}
    if is_dataclass(tp):
        return {
            f.name: _encode_value(getattr(value, f.name), _hints(tp)[f.name], f"{path}.{f.name}")
            for f in fields(tp)
        }
    raise ValidationError(f"field '{path}': unencodable type {tp!r}")


def _decode_value(raw: Any, tp: Any, path: str) -> Any:
    inner = _is_optional(tp)
    if inner is not None:
        if raw is None:
            return None
        return _decode_value(raw, inner, path)
    if tp is bytes:
        if not isinstance(raw, str):
            raise EnvelopeError(f"field '{path}': expected base64 string")
        try:
            return base64.b64decode(raw.encode("ascii"), validate=True)
        except Exception:
            raise EnvelopeError(f"field '{path}': invalid base64 payload") from None
    if tp is bool:
        if not isinstance(raw, bool):
            raise EnvelopeError(f"field '{path}': expected boolean")
        return raw
    if tp is int:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise EnvelopeError(f"field '{path}': expected integer")
        return raw
    if tp is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise EnvelopeError(f"field '{path}': expected number")
        return float(raw)
    if tp is str:
        if not isinstance(raw, str):
            raise EnvelopeError(f"field '{path}': expected string")
        return raw
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(raw)
        except ValueError:
            raise EnvelopeError(f"field '{path}': {raw!r} is not a valid {tp.__name__}") from None
    origin = get_origin(tp)
    if origin in (tuple, list):
        if not isinstance(raw, list):
            raise EnvelopeError(f"field '{path}': expected array")
        item_tp = get_args(tp)[0]
        items = [_decode_value(v, item_tp, f"{path}[{i}]") for i, v in enumerate(raw)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(raw, dict):
            raise EnvelopeError(f"field '{path}': expected object")
        _, val_tp = get_args(tp)
        return {k: _decode_value(v, val_tp, f"{path}.{k}") for k, v in raw.items()}
    if is_dataclass(tp):
        return _decode_dataclass(raw, tp, path)
    raise EnvelopeError(f"field '{path}': undecodable type {tp!r}")


def _decode_dataclass(raw: Any, cls: type, path: str) -> Any:
    if not isinstance(raw, dict):
        raise EnvelopeError(f"field '{path}': expected object for {cls.__name__}")
    hints = _hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = f.name
        if key not in raw:
            raise EnvelopeError(f"field '{path}.{key}': missing")
        kwargs[key] = _decode_value(raw[key], hints[key], f"{path}.{key}")
    extra = set(raw) - set(kwargs)
    if extra:
        raise EnvelopeError(f"field '{path}': unexpected keys {sorted(extra)}")
    try:
        return cls(**kwargs)
    except DeskgridError as exc:
        raise EnvelopeError(f"field '{path}': {exc}") from None
    except Exception as exc:
        raise EnvelopeError(f"field '{path}': invalid {cls.__name__}: {exc}") from None


def encode_envelope(message: Any) -> bytes:
    kind = _TYPE_TO_KIND.get(type(message))
    if kind is None:
        raise ValidationError(f"{type(message).__name__} is not a registered message kind")
    body = _encode_value(message, type(message), kind)
    return json.dumps({"kind": kind, "body": body}, separators=(",", ":")).encode("utf-8")


def decode_envelope(data: bytes) -> Any:
    try:
        obj = json.loads(data.decode("utf-8"))
    except Exception:
        raise EnvelopeError("field 'envelope': not valid UTF-8 JSON") from None
    if not isinstance(obj, dict):
        raise EnvelopeError("field 'envelope': expected a JSON object")
    kind = obj.get("kind")
    if not isinstance(kind, str):
        raise EnvelopeError("field 'kind': missing or not a string")
    cls = _KIND_TO_TYPE.get(kind)
    if cls is None:
        raise EnvelopeError(f"field 'kind': unknown message kind {kind!r}")
    if "body" not in obj:
        raise EnvelopeError("field 'body': missing")
    return _decode_dataclass(obj["body"], cls, kind)


# ---------------------------------------------------------------------------
# Core records double as message kinds so they can travel whole.

register_kind("thread-record", ThreadRecord)
register_kind("dependency-manifest", DependencyManifest)
register_kind("dependency-entry", DependencyEntry)
register_kind("application-record", ApplicationRecord)
register_kind("executor-record", ExecutorRecord)


@wire_message("named-blob")
@dataclass(frozen=True)
class NamedBlob:
    name: str
    data: bytes


# ---------------------------------------------------------------------------
# Manager <-> executor protocol.


@wire_message("register-request")
@dataclass(frozen=True)
class RegisterRequest:
    dedicated: bool
    slots: int
    is_manager: bool = False
    callback_address: str | None = None
    # Stable identity lets a re-registering component replace its stale record.
    identity: str | None = None


@wire_message("register-response")
@dataclass(frozen=True)
class RegisterResponse:
    executor_id: str


@wire_message("ack")
@dataclass(frozen=True)
class Ack:
    ok: bool = True
    note: str | None = None


@wire_message("poll-response")
@dataclass(frozen=True)
class PollResponse:
    thread: ThreadRecord | None = None
    manifest: DependencyManifest | None = None


@wire_message("result-report")
@dataclass(frozen=True)
class ResultReport:
    thread_id: str
    state: ThreadState
    result: bytes | None = None
    failure: str | None = None
    duration_s: float = 0.0

    def __post_init__(self) -> None:
        if self.state not in (ThreadState.COMPLETED, ThreadState.FAILED):
            raise ValidationError("result report state must be completed or failed")
        if self.state is ThreadState.COMPLETED and self.result is None:
            raise ValidationError("completed result report requires a payload")
        if self.state is ThreadState.FAILED and self.failure is None:
            raise ValidationError("failed result report requires a message")


@wire_message("execute-push")
@dataclass(frozen=True)
class ExecutePush:
    thread: ThreadRecord
    manifest: DependencyManifest


@wire_message("push-ack")
@dataclass(frozen=True)
class PushAck:
    accepted: bool
    reason: str | None = None


# ---------------------------------------------------------------------------
# Owner <-> manager protocol.


@wire_message("application-submit")
@dataclass(frozen=True)
class ApplicationSubmit:
    owner_id: str
    manifest: DependencyManifest
    blobs: tuple[NamedBlob, ...] = ()


@wire_message("application-created")
@dataclass(frozen=True)
class ApplicationCreated:
    app_id: str


@wire_message("thread-spec")
@dataclass(frozen=True)
class ThreadSpec:
    task_kind: str
    input: bytes
    priority: int | None = None


@wire_message("thread-submit")
@dataclass(frozen=True)
class ThreadSubmit:
    threads: tuple[ThreadSpec, ...]


@wire_message("threads-accepted")
@dataclass(frozen=True)
class ThreadsAccepted:
    thread_ids: tuple[str, ...]


@wire_message("finished-response")
@dataclass(frozen=True)
class FinishedResponse:
    records: tuple[ThreadRecord, ...]
    next_cursor: int


@wire_message("thread-status")
@dataclass(frozen=True)
class ThreadStatus:
    thread_id: str
    state: ThreadState
    priority: int
    has_result: bool
    failure: str | None = None


@wire_message("thread-status-list")
@dataclass(frozen=True)
class ThreadStatusList:
    threads: tuple[ThreadStatus, ...]


@wire_message("registry-view")
@dataclass(frozen=True)
class RegistryView:
    executors: tuple[ExecutorRecord, ...]
    assignments: dict[str, tuple[str, ...]]


@wire_message("error-reply")
@dataclass(frozen=True)
class ErrorReply:
    code: str
    message: str


@wire_message("event-record")
@dataclass(frozen=True)
class EventRecord:
    ts: float
    name: str
    detail: dict[str, str]


@wire_message("event-log")
@dataclass(frozen=True)
class EventLog:
    events: tuple[EventRecord, ...]
    next_cursor: int


# ---------------------------------------------------------------------------
# Gateway (cross-platform job model).


@wire_message("job-spec")
@dataclass(frozen=True)
class JobSpec:
    job_name: str
    program: str
    args: tuple[str, ...] = ()
    input_files: tuple[NamedBlob, ...] = ()
    expected_outputs: tuple[str, ...] = ()
    platform_hint: str | None = None


@wire_message("task-submission")
@dataclass(frozen=True)
class TaskSubmission:
    submitted_by: str
    jobs: tuple[JobSpec, ...]


@wire_message("task-created")
@dataclass(frozen=True)
class TaskCreated:
    task_id: str


@wire_message("job-status")
@dataclass(frozen=True)
class JobStatus:
    job_name: str
    state: ThreadState
    exit_code: int | None = None
    outputs_ready: bool = False

    def __post_init__(self) -> None:
        if self.outputs_ready != (self.state is ThreadState.COMPLETED):
            raise ValidationError("outputs_ready iff job completed")


@wire_message("task-status")
@dataclass(frozen=True)
class TaskStatusResponse:
    jobs: tuple[JobStatus, ...]


@wire_message("subprocess-result")
@dataclass(frozen=True)
class SubprocessResult:
    exit_code: int
    stdout: bytes
    stderr: bytes
    output_files: tuple[NamedBlob, ...] = ()


@wire_message("job-thread-link")
@dataclass(frozen=True)
class JobThreadLink:
    job_name: str
    thread_id: str


@wire_message("task-mapping")
@dataclass(frozen=True)
class TaskMapping:
    task_id: str
    app_id: str
    submitted_by: str
    links: tuple[JobThreadLink, ...]
