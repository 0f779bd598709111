"""Built-in task implementations and the subprocess adapter.

A task is a pure function ``(payload: bytes, ctx: TaskContext) -> bytes``.
It signals a business failure by raising :class:`TaskFailure`; anything
else it raises is reported as a failure too, by the caller. Four tasks
ship in the registry:

- ``multiplier``: big-integer product of two operands.
- ``pi-slice``: a run of decimal digits of pi from a streaming spigot.
- ``sleep``: timed no-op with optional random jitter, for load tests.
- ``subprocess``: runs an arbitrary program described by a job-spec
  envelope inside a scratch directory.
"""

from __future__ import annotations

import json
import os
import random
import shutil
import stat
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable, Iterator

from deskgrid.errors import NotFoundError, ValidationError
from deskgrid.wire import JobSpec, NamedBlob, SubprocessResult, decode_envelope, encode_envelope


class TaskFailure(Exception):
    """Raised by a task to fail the thread with a message."""


@dataclass
class TaskContext:
    sandbox_dir: str | None = None
    scratch_root: str | None = None

    def new_scratch(self) -> str:
        return tempfile.mkdtemp(prefix="job-", dir=self.scratch_root)


TaskFn = Callable[[bytes, TaskContext], bytes]

_REGISTRY: dict[str, TaskFn] = {}


def register_task(name: str) -> Callable[[TaskFn], TaskFn]:
    def deco(fn: TaskFn) -> TaskFn:
        if name in _REGISTRY:
            raise ValidationError(f"task {name!r} already registered")
        _REGISTRY[name] = fn
        return fn

    return deco


def get_task(name: str) -> TaskFn:
    fn = _REGISTRY.get(name)
    if fn is None:
        raise NotFoundError(f"no task registered under {name!r}")
    return fn


def task_names() -> list[str]:
    return sorted(_REGISTRY)


def run_task(name: str, payload: bytes, ctx: TaskContext | None = None) -> bytes:
    return get_task(name)(payload, ctx or TaskContext())


def _load_json(payload: bytes, task: str) -> object:
    try:
        return json.loads(payload.decode("utf-8"))
    except Exception as exc:
        raise TaskFailure(f"{task} input is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# multiplier


@register_task("multiplier")
def multiplier(payload: bytes, ctx: TaskContext) -> bytes:
    """Product of two integers: input ``[a, b]`` or ``{"a":..,"b":..}``.

    An optional ``delay_ms`` stretches the execution window, which load
    and fault tests use to catch threads in flight.
    """
    obj = _load_json(payload, "multiplier")
    if isinstance(obj, list) and len(obj) == 2:
        a, b, delay_ms = obj[0], obj[1], 0
    elif isinstance(obj, dict):
        try:
            a, b = obj["a"], obj["b"]
        except KeyError as exc:
            raise TaskFailure(f"multiplier input missing key {exc}") from None
        delay_ms = obj.get("delay_ms", 0)
    else:
        raise TaskFailure("multiplier input must be [a, b] or an object")
    for v in (a, b):
        if isinstance(v, bool) or not isinstance(v, int):
            raise TaskFailure("multiplier operands must be integers")
    if delay_ms:
        time.sleep(delay_ms / 1000.0)
    return str(a * b).encode("ascii")


# ---------------------------------------------------------------------------
# pi-slice


def pi_digit_stream() -> Iterator[int]:
    """Unbounded spigot for the decimal digits of pi (3, 1, 4, 1, 5, ...)."""
    q, r, t, k, n, l = 1, 0, 1, 1, 3, 3
    while True:
        if 4 * q + r - t < n * t:
            yield n
            q, r, n = 10 * q, 10 * (r - n * t), (10 * (3 * q + r)) // t - 10 * n
        else:
            q, r, t, k, n, l = (
                q * k,
                (2 * q + r) * l,
                t * l,
                k + 1,
                (q * (7 * k + 2) + r * l) // (t * l),
                l + 2,
            )


def pi_digit_slice(start: int, count: int) -> str:
    """Fractional digits of pi, 1-based: slice(1, 5) == "14159"."""
    if start < 1 or count < 0:
        raise ValidationError("pi slice needs start >= 1 and count >= 0")
    return "".join(str(d) for d in islice(pi_digit_stream(), start, start + count))


@register_task("pi-slice")
def pi_slice(payload: bytes, ctx: TaskContext) -> bytes:
    """Digits of pi: input ``{"start": s, "count": n, "work_scale": w}``.

    The spigot streams from the first digit every time, so later slices
    cost more; ``work_scale`` recomputes the slice w times to scale CPU
    cost without changing the answer.
    """
    obj = _load_json(payload, "pi-slice")
    if not isinstance(obj, dict):
        raise TaskFailure("pi-slice input must be an object")
    try:
        start, count = obj["start"], obj["count"]
    except KeyError as exc:
        raise TaskFailure(f"pi-slice input missing key {exc}") from None
    work_scale = obj.get("work_scale", 1)
    for name, v in (("start", start), ("count", count), ("work_scale", work_scale)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise TaskFailure(f"pi-slice {name} must be a positive integer")
    digits = pi_digit_slice(start, count)
    for _ in range(work_scale - 1):
        if pi_digit_slice(start, count) != digits:
            raise TaskFailure("pi-slice recomputation disagreed with itself")
    return digits.encode("ascii")


# ---------------------------------------------------------------------------
# sleep


@register_task("sleep")
def sleep_task(payload: bytes, ctx: TaskContext) -> bytes:
    """Sleep ``ms`` plus uniform jitter up to ``jitter_max_ms``."""
    obj = _load_json(payload, "sleep")
    if not isinstance(obj, dict):
        raise TaskFailure("sleep input must be an object")
    ms = obj.get("ms", 0)
    jitter_max_ms = obj.get("jitter_max_ms", 0)
    for name, v in (("ms", ms), ("jitter_max_ms", jitter_max_ms)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise TaskFailure(f"sleep {name} must be a non-negative integer")
    began = time.monotonic()
    time.sleep((ms + random.uniform(0, jitter_max_ms)) / 1000.0)
    elapsed_ms = int((time.monotonic() - began) * 1000)
    return json.dumps({"elapsed_ms": elapsed_ms}).encode("ascii")


# ---------------------------------------------------------------------------
# subprocess adapter


def _safe_join(root: str, name: str) -> str:
    if os.path.isabs(name):
        raise TaskFailure(f"job file name {name!r} must be relative")
    path = os.path.realpath(os.path.join(root, name))
    if path != root and not path.startswith(root + os.sep):
        raise TaskFailure(f"job file name {name!r} escapes the work directory")
    return path


def _resolve_program(spec: JobSpec, workdir: str, sandbox_dir: str | None) -> str:
    staged = os.path.join(workdir, spec.program)
    if os.path.isfile(staged):
        return staged
    if sandbox_dir is not None:
        if spec.platform_hint:
            variant = os.path.join(sandbox_dir, f"{spec.program}.{spec.platform_hint}")
            if os.path.isfile(variant):
                return variant
        candidate = os.path.join(sandbox_dir, spec.program)
        if os.path.isfile(candidate):
            return candidate
    found = shutil.which(spec.program)
    if found is None:
        raise TaskFailure(f"job program {spec.program!r} not found")
    return found


def run_job(spec: JobSpec, workdir: str, sandbox_dir: str | None = None) -> SubprocessResult:
    """Stage inputs, run the program, harvest declared outputs.

    A nonzero exit is returned, not raised; output files are collected
    only on exit 0, and a missing declared output is a failure.
    """
    workdir = os.path.realpath(workdir)
    for blob in spec.input_files:
        path = _safe_join(workdir, blob.name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(blob.data)
    program = _resolve_program(spec, workdir, sandbox_dir)
    # A platform variant of a python program (program.py.tag) is still python.
    if spec.program.endswith(".py") or program.endswith(".py"):
        argv = [sys.executable, program, *spec.args]
    else:
        mode = os.stat(program).st_mode
        if not mode & stat.S_IXUSR:
            os.chmod(program, mode | stat.S_IXUSR)
        argv = [program, *spec.args]
    try:
        proc = subprocess.run(argv, cwd=workdir, capture_output=True, timeout=300)
    except OSError as exc:
        raise TaskFailure(f"job program {spec.program!r} failed to start: {exc}") from None
    except subprocess.TimeoutExpired:
        raise TaskFailure(f"job program {spec.program!r} timed out") from None
    outputs: list[NamedBlob] = []
    if proc.returncode == 0:
        for name in spec.expected_outputs:
            path = _safe_join(workdir, name)
            if not os.path.isfile(path):
                raise TaskFailure(f"job did not produce declared output {name!r}")
            with open(path, "rb") as fh:
                outputs.append(NamedBlob(name=name, data=fh.read()))
    return SubprocessResult(
        exit_code=proc.returncode,
        stdout=proc.stdout,
        stderr=proc.stderr,
        output_files=tuple(outputs),
    )


@register_task("subprocess")
def subprocess_task(payload: bytes, ctx: TaskContext) -> bytes:
    """Run a job-spec envelope; result is a subprocess-result envelope."""
    try:
        spec = decode_envelope(payload)
    except Exception as exc:
        raise TaskFailure(f"subprocess input is not a job-spec envelope: {exc}") from None
    if not isinstance(spec, JobSpec):
        raise TaskFailure("subprocess input must be a job-spec envelope")
    workdir = ctx.new_scratch()
    try:
        result = run_job(spec, workdir, ctx.sandbox_dir)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    if result.exit_code != 0:
        excerpt = result.stderr.decode("utf-8", "replace")[:200]
        raise TaskFailure(f"exit status {result.exit_code}: {excerpt}")
    return encode_envelope(result)
