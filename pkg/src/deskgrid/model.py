"""Domain records and the grid-thread lifecycle state machine.

All records here are immutable values; mutation happens by replacing a record
inside the manager or store under their own locking. Thread priorities are
plain integers on a bounded scale (0..10, 10 highest, 10 the default).
"""

from __future__ import annotations

import hashlib
import uuid
from dataclasses import dataclass, replace
from enum import Enum

from deskgrid.errors import StateError, ValidationError

PRIORITY_MIN = 0
PRIORITY_MAX = 10
DEFAULT_PRIORITY = PRIORITY_MAX


def check_priority(value: int) -> int:
    """Validate a priority, returning it unchanged."""
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValidationError(f"priority must be an integer, got {value!r}")
    if not PRIORITY_MIN <= value <= PRIORITY_MAX:
        raise ValidationError(
            f"priority {value} outside [{PRIORITY_MIN}, {PRIORITY_MAX}]"
        )
    return value


class ThreadState(str, Enum):
    READY = "ready"
    SCHEDULED = "scheduled"
    EXECUTING = "executing"
    COMPLETED = "completed"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (ThreadState.COMPLETED, ThreadState.FAILED)


# Requeue paths (scheduled/executing back to ready) cover push failures and
# executor loss; failed->ready is the manual-retry hook.
_LEGAL_TRANSITIONS = frozenset(
    {
        (ThreadState.READY, ThreadState.SCHEDULED),
        (ThreadState.SCHEDULED, ThreadState.EXECUTING),
        (ThreadState.SCHEDULED, ThreadState.READY),
        (ThreadState.EXECUTING, ThreadState.COMPLETED),
        (ThreadState.EXECUTING, ThreadState.FAILED),
        (ThreadState.EXECUTING, ThreadState.READY),
        (ThreadState.FAILED, ThreadState.READY),
    }
)


def validate_transition(src: ThreadState, dst: ThreadState) -> bool:
    """True exactly for the legal lifecycle transitions."""
    return (src, dst) in _LEGAL_TRANSITIONS


def require_transition(src: ThreadState, dst: ThreadState) -> None:
    if not validate_transition(src, dst):
        raise StateError(f"illegal thread transition {src.value} -> {dst.value}")


def new_id() -> str:
    return uuid.uuid4().hex


def blob_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class DependencyEntry:
    name: str
    content_hash: str
    size: int


@dataclass(frozen=True)
class DependencyManifest:
    entries: tuple[DependencyEntry, ...] = ()

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(names) != len(set(names)):
            raise ValidationError("duplicate dependency names in manifest")

    def entry(self, name: str) -> DependencyEntry | None:
        for e in self.entries:
            if e.name == name:
                return e
        return None

    @staticmethod
    def for_blobs(blobs: dict[str, bytes]) -> "DependencyManifest":
        entries = tuple(
            DependencyEntry(name=n, content_hash=blob_hash(b), size=len(b))
            for n, b in blobs.items()
        )
        return DependencyManifest(entries=entries)


@dataclass(frozen=True)
class ThreadRecord:
    thread_id: str
    app_id: str
    seq: int
    priority: int
    task_kind: str
    input: bytes
    state: ThreadState = ThreadState.READY
    result: bytes | None = None
    failure: str | None = None
    assigned_executor: str | None = None

    def __post_init__(self) -> None:
        check_priority(self.priority)
        if (self.result is not None) != (self.state is ThreadState.COMPLETED):
            raise ValidationError(
                f"thread {self.thread_id}: result present iff completed "
                f"(state={self.state.value}, result={'set' if self.result is not None else 'unset'})"
            )
        if self.failure is not None and self.state is not ThreadState.FAILED:
            raise ValidationError(
                f"thread {self.thread_id}: failure message only on failed threads"
            )

    def transitioned(self, dst: ThreadState, **changes) -> "ThreadRecord":
        """Return a copy in state ``dst``, asserting the transition is legal."""
        require_transition(self.state, dst)
        return replace(self, state=dst, **changes)


@dataclass(frozen=True)
class ApplicationRecord:
    app_id: str
    owner_id: str
    manifest: DependencyManifest
    thread_ids: tuple[str, ...] = ()
    created_at: float = 0.0
    finished: bool = False


@dataclass(frozen=True)
class ExecutorRecord:
    executor_id: str
    dedicated: bool
    is_manager: bool
    slots: int
    last_heartbeat: float
    callback_address: str | None = None

    def __post_init__(self) -> None:
        if self.slots < 1:
            raise ValidationError("executor slots must be >= 1")
        if self.dedicated and not self.callback_address:
            raise ValidationError("dedicated executor requires a callback address")
