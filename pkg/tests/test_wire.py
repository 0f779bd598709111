import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _wiregen import BUILDERS, gen_message
from deskgrid.errors import EnvelopeError, ValidationError
from deskgrid.model import ThreadState
from deskgrid.wire import (
    Ack,
    NamedBlob,
    ResultReport,
    decode_envelope,
    encode_envelope,
    registered_kinds,
)


def test_every_registered_kind_has_a_builder():
    assert set(BUILDERS) == set(registered_kinds())


@pytest.mark.parametrize("kind", sorted(BUILDERS))
def test_round_trip_per_kind(kind):
    rng = random.Random(f"rt-{kind}")
    for _ in range(25):
        msg = gen_message(rng, kind)
        data = encode_envelope(msg)
        assert decode_envelope(data) == msg
        # The envelope is plain JSON with the advertised shape.
        obj = json.loads(data)
        assert obj["kind"] == kind and isinstance(obj["body"], dict)


def test_bytes_travel_base64():
    data = encode_envelope(NamedBlob(name="b", data=b"\x00\xff\x10"))
    body = json.loads(data)["body"]
    assert body["data"] == "AP8Q"


def test_decode_error_names_offending_field():
    raw = json.dumps({"kind": "named-blob", "body": {"name": 5, "data": "AA=="}})
    with pytest.raises(EnvelopeError, match=r"named-blob\.name"):
        decode_envelope(raw.encode())
    raw = json.dumps({"kind": "named-blob", "body": {"name": "x", "data": "!!"}})
    with pytest.raises(EnvelopeError, match=r"named-blob\.data"):
        decode_envelope(raw.encode())
    raw = json.dumps({"kind": "named-blob", "body": {"name": "x"}})
    with pytest.raises(EnvelopeError, match=r"named-blob\.data.*missing"):
        decode_envelope(raw.encode())


def test_decode_rejects_unknown_kind_and_extra_fields():
    with pytest.raises(EnvelopeError, match="unknown message kind"):
        decode_envelope(json.dumps({"kind": "nope", "body": {}}).encode())
    raw = json.dumps({"kind": "ack", "body": {"ok": True, "note": None, "zzz": 1}})
    with pytest.raises(EnvelopeError, match="unexpected keys"):
        decode_envelope(raw.encode())


def test_decode_rejects_bool_as_int_and_int_constraints():
    raw = json.dumps({"kind": "register-response", "body": {"executor_id": "e"}})
    assert decode_envelope(raw.encode()).executor_id == "e"
    raw = json.dumps({"kind": "threads-accepted", "body": {"thread_ids": "no"}})
    with pytest.raises(EnvelopeError, match="expected array"):
        decode_envelope(raw.encode())
    raw = json.dumps({"kind": "event-record",
                      "body": {"ts": True, "name": "x", "detail": {}}})
    with pytest.raises(EnvelopeError, match="expected number"):
        decode_envelope(raw.encode())


def test_decode_enforces_record_invariants():
    body = {
        "thread_id": "t", "app_id": "a", "seq": 0, "priority": 99,
        "task_kind": "multiplier", "input": "", "state": "ready",
        "result": None, "failure": None, "assigned_executor": None,
    }
    raw = json.dumps({"kind": "thread-record", "body": body}).encode()
    with pytest.raises(EnvelopeError, match="priority"):
        decode_envelope(raw)


def test_result_report_invariants():
    with pytest.raises(ValidationError):
        ResultReport(thread_id="t", state=ThreadState.READY)
    with pytest.raises(ValidationError):
        ResultReport(thread_id="t", state=ThreadState.COMPLETED)
    with pytest.raises(ValidationError):
        ResultReport(thread_id="t", state=ThreadState.FAILED)
    ResultReport(thread_id="t", state=ThreadState.COMPLETED, result=b"")
    ResultReport(thread_id="t", state=ThreadState.FAILED, failure="boom")


def test_encode_rejects_unregistered_type():
    with pytest.raises(ValidationError):
        encode_envelope(object())


def test_unicode_and_control_characters_survive():
    msg = Ack(ok=True, note="π 漢字 \"quotes\" \n\t ctrl\x07")
    assert decode_envelope(encode_envelope(msg)) == msg


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=0, max_size=400))
def test_fuzz_random_bytes_never_crash(data):
    try:
        decode_envelope(data)
    except EnvelopeError:
        pass


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.data())
def test_fuzz_mutated_valid_envelopes_never_crash(seed, data):
    rng = random.Random(seed)
    _, msg = __import__("_wiregen").gen_any(rng)
    raw = bytearray(encode_envelope(msg))
    for _ in range(data.draw(st.integers(min_value=1, max_value=8))):
        op = rng.randrange(3)
        if op == 0 and raw:
            raw[rng.randrange(len(raw))] = rng.randrange(256)
        elif op == 1:
            raw.insert(rng.randrange(len(raw) + 1), rng.randrange(256))
        elif raw:
            del raw[rng.randrange(len(raw))]
    try:
        decode_envelope(bytes(raw))
    except EnvelopeError:
        pass
