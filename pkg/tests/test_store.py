import logging
import os
import threading
import zlib

import pytest

from deskgrid.errors import IntegrityError
from deskgrid.store import JournalStore


def test_put_get_delete_roundtrip(tmp_path):
    path = str(tmp_path / "a.journal")
    with JournalStore(path) as store:
        store.put("thread", "t1", b"one")
        store.put("thread", "t2", b"two")
        store.put("app", "t1", b"same key, other kind")
        assert store.get("thread", "t1") == b"one"
        assert store.get("app", "t1") == b"same key, other kind"
        store.put("thread", "t1", b"one v2")
        assert store.get("thread", "t1") == b"one v2"
        store.delete("thread", "t2")
        assert store.get("thread", "t2") is None
        assert store.count("thread") == 1


def test_replay_restores_latest_values(tmp_path):
    path = str(tmp_path / "b.journal")
    with JournalStore(path) as store:
        for i in range(50):
            store.put("k", f"id{i % 7}", f"v{i}".encode())
        store.delete("k", "id0")
    with JournalStore(path) as store:
        assert store.get("k", "id0") is None
        assert store.get("k", "id1") == b"v43"
        assert store.count("k") == 6


def test_torn_tail_is_truncated_with_warning(tmp_path, caplog):
    path = str(tmp_path / "c.journal")
    with JournalStore(path) as store:
        store.put("k", "a", b"alpha")
        store.put("k", "b", b"beta")
    good_size = os.path.getsize(path)
    with open(path, "ab") as fh:  # half a record, as a crash mid-append would leave
        fh.write((99).to_bytes(4, "big") + b"\x00\x00\x00\x00" + b"partial")
    with caplog.at_level(logging.WARNING, logger="deskgrid.store"):
        with JournalStore(path) as store:
            assert store.get("k", "a") == b"alpha"
            assert store.get("k", "b") == b"beta"
            store.put("k", "c", b"gamma")  # journal still usable after truncation
    assert any("torn record" in rec.message for rec in caplog.records)
    assert os.path.getsize(path) > good_size


def test_corrupt_crc_drops_tail_records(tmp_path):
    path = str(tmp_path / "d.journal")
    with JournalStore(path) as store:
        store.put("k", "a", b"alpha")
        offset_b = os.path.getsize(path)
        store.put("k", "b", b"beta")
    with open(path, "r+b") as fh:  # flip one payload byte of the second record
        fh.seek(offset_b + 8 + 10)
        byte = fh.read(1)
        fh.seek(offset_b + 8 + 10)
        fh.write(bytes([byte[0] ^ 0xFF]))
    with JournalStore(path) as store:
        assert store.get("k", "a") == b"alpha"
        assert store.get("k", "b") is None


def test_refuses_foreign_files(tmp_path):
    path = str(tmp_path / "not-a-journal.bin")
    with open(path, "wb") as fh:
        fh.write(b"something else entirely")
    with pytest.raises(IntegrityError):
        JournalStore(path)


def test_compaction_preserves_live_set_and_shrinks_file(tmp_path):
    path = str(tmp_path / "e.journal")
    with JournalStore(path) as store:
        blob = b"x" * 4096
        for i in range(600):
            store.put("k", f"id{i % 5}", blob + str(i).encode())
        before = os.path.getsize(path)
        store.compact()
        after = os.path.getsize(path)
        assert after < before
        assert store.count("k") == 5
        assert store.get("k", "id4") == blob + b"599"
    with JournalStore(path) as store:
        assert store.count("k") == 5


def test_auto_compaction_kicks_in(tmp_path):
    path = str(tmp_path / "f.journal")
    with JournalStore(path) as store:
        blob = b"y" * 8192
        for i in range(400):  # same key: ~3 MiB of dead weight
            store.put("k", "only", blob + str(i).encode())
        assert os.path.getsize(path) < 1 << 20
        assert store.get("k", "only") == blob + b"399"


def test_concurrent_puts_all_survive(tmp_path):
    path = str(tmp_path / "g.journal")
    store = JournalStore(path)

    def writer(base: int) -> None:
        for i in range(40):
            store.put("k", f"{base}-{i}", f"{base}:{i}".encode())

    threads = [threading.Thread(target=writer, args=(n,)) for n in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    store.close()
    with JournalStore(path) as reopened:
        assert reopened.count("k") == 8 * 40
        assert reopened.get("k", "3-39") == b"3:39"


def test_record_framing_is_length_prefixed_and_checksummed(tmp_path):
    path = str(tmp_path / "h.journal")
    with JournalStore(path) as store:
        store.put("k", "a", b"payload")
    with open(path, "rb") as fh:
        assert fh.read(8) == b"DGRIDJ1\n"
        length = int.from_bytes(fh.read(4), "big")
        crc = int.from_bytes(fh.read(4), "big")
        payload = fh.read(length)
        assert zlib.crc32(payload) == crc
        assert fh.read() == b""
