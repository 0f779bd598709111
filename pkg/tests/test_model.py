import pytest

from deskgrid.errors import StateError, ValidationError
from deskgrid.model import (
    DEFAULT_PRIORITY,
    PRIORITY_MAX,
    PRIORITY_MIN,
    DependencyEntry,
    DependencyManifest,
    ExecutorRecord,
    ThreadRecord,
    ThreadState,
    blob_hash,
    check_priority,
    new_id,
    require_transition,
    validate_transition,
)

S = ThreadState

# The full lifecycle, spelled out pair by pair.
LEGAL = {
    (S.READY, S.SCHEDULED),
    (S.SCHEDULED, S.EXECUTING),
    (S.SCHEDULED, S.READY),
    (S.EXECUTING, S.COMPLETED),
    (S.EXECUTING, S.FAILED),
    (S.EXECUTING, S.READY),
    (S.FAILED, S.READY),
}


def test_transition_table_brute_force():
    for src in S:
        for dst in S:
            assert validate_transition(src, dst) == ((src, dst) in LEGAL), (src, dst)


def test_require_transition_raises_on_illegal():
    require_transition(S.READY, S.SCHEDULED)
    with pytest.raises(StateError):
        require_transition(S.COMPLETED, S.READY)
    with pytest.raises(StateError):
        require_transition(S.READY, S.EXECUTING)


def test_terminal_states():
    assert S.COMPLETED.terminal and S.FAILED.terminal
    assert not any(s.terminal for s in (S.READY, S.SCHEDULED, S.EXECUTING))


def test_priority_bounds_and_default():
    assert PRIORITY_MIN == 0 and PRIORITY_MAX == 10
    assert DEFAULT_PRIORITY == 10
    for p in range(11):
        assert check_priority(p) == p
    for bad in (-1, 11, 3.5, "7", None, True, False):
        with pytest.raises(ValidationError):
            check_priority(bad)


def _thread(**overrides) -> ThreadRecord:
    base = dict(thread_id="t1", app_id="a1", seq=0, priority=10,
                task_kind="multiplier", input=b"[2,3]")
    base.update(overrides)
    return ThreadRecord(**base)


def test_thread_record_result_iff_completed():
    _thread(state=S.COMPLETED, result=b"6", assigned_executor=None)
    with pytest.raises(ValidationError):
        _thread(state=S.COMPLETED)  # completed but no result
    with pytest.raises(ValidationError):
        _thread(state=S.READY, result=b"6")  # result without completion
    with pytest.raises(ValidationError):
        _thread(state=S.READY, failure="boom")  # failure on a live thread
    _thread(state=S.FAILED, failure="boom")


def test_thread_record_priority_checked():
    with pytest.raises(ValidationError):
        _thread(priority=11)


def test_transitioned_enforces_machine_and_applies_changes():
    rec = _thread()
    sched = rec.transitioned(S.SCHEDULED, assigned_executor="e1")
    assert sched.state is S.SCHEDULED and sched.assigned_executor == "e1"
    run = sched.transitioned(S.EXECUTING)
    done = run.transitioned(S.COMPLETED, result=b"6", assigned_executor=None)
    assert done.result == b"6"
    with pytest.raises(StateError):
        done.transitioned(S.READY)
    # Requeue keeps the original seq; nothing in the record changes it.
    back = run.transitioned(S.READY, assigned_executor=None)
    assert back.seq == rec.seq


def test_manifest_rejects_duplicate_names():
    entry = DependencyEntry(name="a", content_hash=blob_hash(b"x"), size=1)
    DependencyManifest(entries=(entry,))
    with pytest.raises(ValidationError):
        DependencyManifest(entries=(entry, entry))


def test_manifest_for_blobs_and_lookup():
    manifest = DependencyManifest.for_blobs({"f1": b"abc", "f2": b""})
    assert manifest.entry("f1").size == 3
    assert manifest.entry("f1").content_hash == blob_hash(b"abc")
    assert manifest.entry("missing") is None


def test_executor_record_invariants():
    ExecutorRecord(executor_id="e", dedicated=False, is_manager=False,
                   slots=1, last_heartbeat=0.0)
    with pytest.raises(ValidationError):
        ExecutorRecord(executor_id="e", dedicated=False, is_manager=False,
                       slots=0, last_heartbeat=0.0)
    with pytest.raises(ValidationError):
        ExecutorRecord(executor_id="e", dedicated=True, is_manager=False,
                       slots=1, last_heartbeat=0.0)  # no callback


def test_new_id_unique_and_hex():
    ids = {new_id() for _ in range(100)}
    assert len(ids) == 100
    assert all(len(i) == 32 and int(i, 16) >= 0 for i in ids)
