"""Append-only journal store.

A single-file key/value journal: every put/delete appends one
length-prefixed, CRC32-checksummed JSON record and fsyncs before
returning. Startup replays the journal into memory, truncating a torn
tail (partial record from a crash mid-write) with a warning. When the
file grows well past the live set the journal is compacted in place via
write-new/rename.

Values are opaque bytes; callers bring their own codec.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import zlib
from base64 import b64decode, b64encode
from typing import Iterator

from deskgrid.errors import IntegrityError

log = logging.getLogger(__name__)

_MAGIC = b"DGRIDJ1\n"
_COMPACT_MIN_BYTES = 1 << 20
_COMPACT_RATIO = 3


def _fsync_dir(path: str) -> None:
    fd = os.open(os.path.dirname(os.path.abspath(path)) or ".", os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class JournalStore:
    """Durable mapping of (kind, key) -> bytes backed by one journal file."""

    def __init__(self, path: str) -> None:
        self._path = path
        self._lock = threading.RLock()
        self._live: dict[tuple[str, str], bytes] = {}
        self._replay()
        self._fh = open(self._path, "ab")

    @property
    def path(self) -> str:
        return self._path

    # -- replay ------------------------------------------------------------

    def _replay(self) -> None:
        if not os.path.exists(self._path):
            with open(self._path, "wb") as fh:
                fh.write(_MAGIC)
                fh.flush()
                os.fsync(fh.fileno())
            _fsync_dir(self._path)
            return
        with open(self._path, "rb") as fh:
            head = fh.read(len(_MAGIC))
            if len(head) < len(_MAGIC):
                log.warning("journal %s: torn header, starting empty", self._path)
                self._truncate_to(0, write_magic=True)
                return
            if head != _MAGIC:
                raise IntegrityError(f"{self._path} is not a journal file")
            offset = len(_MAGIC)
            while True:
                frame = fh.read(8)
                if not frame:
                    break
                if len(frame) < 8:
                    self._torn(offset)
                    return
                length = int.from_bytes(frame[:4], "big")
                want_crc = int.from_bytes(frame[4:8], "big")
                payload = fh.read(length)
                if len(payload) < length or zlib.crc32(payload) != want_crc:
                    self._torn(offset)
                    return
                try:
                    rec = json.loads(payload)
                    kind, key, op = rec["kind"], rec["key"], rec["op"]
                    if op == "put":
                        self._live[(kind, key)] = b64decode(rec["data"])
                    elif op == "delete":
                        self._live.pop((kind, key), None)
                    else:
                        raise ValueError(f"bad op {op!r}")
                except Exception:
                    self._torn(offset)
                    return
                offset += 8 + length

    def _torn(self, offset: int) -> None:
        log.warning(
            "journal %s: torn record at offset %d, truncating tail", self._path, offset
        )
        self._truncate_to(offset)

    def _truncate_to(self, offset: int, write_magic: bool = False) -> None:
        with open(self._path, "r+b" if offset else "wb") as fh:
            fh.truncate(offset)
            if write_magic:
                fh.write(_MAGIC)
            fh.flush()
            os.fsync(fh.fileno())

    # -- mutation ----------------------------------------------------------

    def _append(self, record: dict) -> None:
        payload = json.dumps(record, separators=(",", ":")).encode("utf-8")
        frame = len(payload).to_bytes(4, "big") + zlib.crc32(payload).to_bytes(4, "big")
        self._fh.write(frame + payload)
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def put(self, kind: str, key: str, data: bytes) -> None:
        with self._lock:
            self._append({"kind": kind, "key": key, "op": "put",
                          "data": b64encode(data).decode("ascii")})
            self._live[(kind, key)] = data
            self._maybe_compact()

    def delete(self, kind: str, key: str) -> None:
        with self._lock:
            if (kind, key) not in self._live:
                return
            self._append({"kind": kind, "key": key, "op": "delete"})
            del self._live[(kind, key)]

    # -- access ------------------------------------------------------------

    def get(self, kind: str, key: str) -> bytes | None:
        with self._lock:
            return self._live.get((kind, key))

    def items(self, kind: str) -> Iterator[tuple[str, bytes]]:
        with self._lock:
            snapshot = [(k, v) for (kd, k), v in self._live.items() if kd == kind]
        return iter(snapshot)

    def count(self, kind: str) -> int:
        with self._lock:
            return sum(1 for (kd, _) in self._live if kd == kind)

    # -- maintenance -------------------------------------------------------

    def _live_bytes(self) -> int:
        return sum(len(v) + 64 for v in self._live.values())

    def _maybe_compact(self) -> None:
        size = self._fh.tell()
        if size > _COMPACT_MIN_BYTES and size > _COMPACT_RATIO * self._live_bytes():
            self.compact()

    def compact(self) -> None:
        with self._lock:
            tmp = self._path + ".compact"
            with open(tmp, "wb") as fh:
                fh.write(_MAGIC)
                for (kind, key), data in self._live.items():
                    payload = json.dumps(
                        {"kind": kind, "key": key, "op": "put",
                         "data": b64encode(data).decode("ascii")},
                        separators=(",", ":"),
                    ).encode("utf-8")
                    fh.write(len(payload).to_bytes(4, "big"))
                    fh.write(zlib.crc32(payload).to_bytes(4, "big"))
                    fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            self._fh.close()
            os.replace(tmp, self._path)
            _fsync_dir(self._path)
            self._fh = open(self._path, "ab")
            log.info("journal %s: compacted to %d bytes", self._path, self._fh.tell())

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self) -> "JournalStore":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
