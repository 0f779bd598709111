"""Parameter-sweep plan files: parse, expand, substitute, build job specs.

A plan declares integer parameters and one task block of staging and
execution commands:

    #Parameter definition
    parameter X integer range from 1 to 100 step 1;
    parameter Y integer default 1;
    #Task definition
    task main
        copy calc.$OS node:calc
        node:execute ./calc $X $Y
        copy node:output ./output.$jobname
    endtask

``copy`` moves a file between the submitting side and the node; exactly
one side carries the ``node:`` prefix, which fixes the direction.
Comment lines start with ``#``. Expansion takes the cartesian product
of the parameter values in declaration order (first parameter is the
slowest-varying axis), one sweep point per combination, capped at
1,000,000. Each point gets a generated ``$jobname``: ``j`` plus the
job index zero-padded to the width of the total count. ``$OS`` and
``$jobname`` are built-ins; every other ``$var``/``${var}`` must name
a declared parameter, checked at parse time. Values are substituted
literally, never re-expanded. Quotes group tokens and are consumed by
the tokenizer, so they never survive into job specs.
"""

from __future__ import annotations

import os
import re
import shlex
from dataclasses import dataclass
from itertools import product
from typing import Callable, Iterable, Mapping, Union

from deskgrid.errors import ValidationError
from deskgrid.wire import JobSpec, NamedBlob

MAX_JOBS = 1_000_000
BUILTINS = ("OS", "jobname")

_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")
_REF_RE = re.compile(r"\$(?:\{([A-Za-z_]\w*)\}|([A-Za-z_]\w*))")
_PLAIN_TOKEN_RE = re.compile(r"^[^\s'\"\\]+$")


class PlanError(ValidationError):
    pass


@dataclass(frozen=True)
class RangeSpec:
    lo: int
    hi: int
    step: int


@dataclass(frozen=True)
class DefaultSpec:
    value: int


@dataclass(frozen=True)
class ParameterDecl:
    name: str
    spec: RangeSpec | DefaultSpec

    @property
    def values(self) -> tuple[int, ...]:
        if isinstance(self.spec, DefaultSpec):
            return (self.spec.value,)
        return tuple(range(self.spec.lo, self.spec.hi + 1, self.spec.step))


@dataclass(frozen=True)
class CopyToNode:
    src_template: str  # file on the submitting side, under the program dir
    dst: str           # name on the node ("node:" stripped)


@dataclass(frozen=True)
class Execute:
    program_template: str
    arg_templates: tuple[str, ...]


@dataclass(frozen=True)
class CopyFromNode:
    src: str           # name on the node ("node:" stripped)
    dst_template: str  # destination on the submitting side


PlanCommand = Union[CopyToNode, Execute, CopyFromNode]


@dataclass(frozen=True)
class PlanDocument:
    parameters: tuple[ParameterDecl, ...]
    task_name: str
    commands: tuple[PlanCommand, ...]


@dataclass(frozen=True)
class SweepPoint:
    jobname: str
    bindings: tuple[tuple[str, str], ...]  # parameter name -> value text

    def mapping(self, extra: Mapping[str, str] | None = None) -> dict[str, str]:
        out = dict(self.bindings)
        out["jobname"] = self.jobname
        if extra:
            out.update(extra)
        return out


# ---------------------------------------------------------------------------
# parsing


def _tokens(line: str, lineno: int) -> list[str]:
    try:
        return shlex.split(line, comments=False, posix=True)
    except ValueError as exc:
        raise PlanError(f"line {lineno}: {exc}") from None


def _int_token(tok: str, what: str, lineno: int) -> int:
    try:
        return int(tok, 10)
    except ValueError:
        raise PlanError(f"line {lineno}: {what} {tok!r} is not an integer") from None


def _refs(template: str) -> set[str]:
    """Variable names referenced; rejects stray or malformed '$' uses."""
    names: set[str] = set()
    pos = 0
    for match in _REF_RE.finditer(template):
        if "$" in template[pos:match.start()]:
            raise PlanError(f"stray '$' in {template!r}")
        names.add(match.group(1) or match.group(2))
        pos = match.end()
    if "$" in template[pos:]:
        raise PlanError(f"stray '$' in {template!r}")
    return names


def _parse_parameter(tokens: list[str], lineno: int) -> ParameterDecl:
    if len(tokens) < 3 or tokens[0] != "parameter" or tokens[2] != "integer":
        raise PlanError(f"line {lineno}: only 'parameter NAME integer ...' is supported")
    name = tokens[1]
    if not _NAME_RE.match(name):
        raise PlanError(f"line {lineno}: bad parameter name {name!r}")
    if name in BUILTINS:
        raise PlanError(f"line {lineno}: parameter name {name!r} is reserved")
    rest = tokens[3:]
    if rest[:1] == ["range"]:
        if len(rest) != 7 or rest[1] != "from" or rest[3] != "to" or rest[5] != "step":
            raise PlanError(
                f"line {lineno}: expected 'range from A to B step S', got {' '.join(rest)!r}"
            )
        lo = _int_token(rest[2], "range start", lineno)
        hi = _int_token(rest[4], "range end", lineno)
        step = _int_token(rest[6], "range step", lineno)
        if step < 1:
            raise PlanError(f"line {lineno}: range step must be >= 1")
        if lo > hi:
            raise PlanError(f"line {lineno}: range start {lo} exceeds end {hi}")
        return ParameterDecl(name=name, spec=RangeSpec(lo=lo, hi=hi, step=step))
    if rest[:1] == ["default"]:
        if len(rest) != 2:
            raise PlanError(f"line {lineno}: expected 'default V', got {' '.join(rest)!r}")
        return ParameterDecl(name=name,
                             spec=DefaultSpec(value=_int_token(rest[1], "default", lineno)))
    raise PlanError(
        f"line {lineno}: parameter must use 'range from A to B step S' or 'default V'"
    )


def _parse_copy(tokens: list[str], lineno: int) -> PlanCommand:
    if len(tokens) != 3:
        raise PlanError(f"line {lineno}: expected 'copy SRC DST'")
    src, dst = tokens[1], tokens[2]
    src_on_node = src.startswith("node:")
    dst_on_node = dst.startswith("node:")
    if src_on_node == dst_on_node:
        raise PlanError(f"line {lineno}: exactly one side of a copy must be 'node:'-prefixed")
    if src_on_node:
        if len(src) == len("node:"):
            raise PlanError(f"line {lineno}: empty node-side path")
        return CopyFromNode(src=src[len("node:"):], dst_template=dst)
    if len(dst) == len("node:"):
        raise PlanError(f"line {lineno}: empty node-side path")
    return CopyToNode(src_template=src, dst=dst[len("node:"):])


def _command_templates(cmd: PlanCommand) -> tuple[str, ...]:
    if isinstance(cmd, CopyToNode):
        return (cmd.src_template, cmd.dst)
    if isinstance(cmd, Execute):
        return (cmd.program_template, *cmd.arg_templates)
    return (cmd.src, cmd.dst_template)


def parse_plan(text: str) -> PlanDocument:
    parameters: list[ParameterDecl] = []
    seen: set[str] = set()
    task_name: str | None = None
    commands: list[PlanCommand] = []
    command_lines: list[int] = []
    in_task = False
    task_done = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_task:
            tokens = _tokens(line, lineno)
            if tokens == ["endtask"]:
                in_task = False
                task_done = True
            elif tokens[0] == "copy":
                commands.append(_parse_copy(tokens, lineno))
                command_lines.append(lineno)
            elif tokens[0] == "node:execute":
                if len(tokens) < 2:
                    raise PlanError(f"line {lineno}: node:execute needs a program")
                if any(isinstance(c, Execute) for c in commands):
                    raise PlanError(f"line {lineno}: only one node:execute per task")
                commands.append(Execute(program_template=tokens[1],
                                        arg_templates=tuple(tokens[2:])))
                command_lines.append(lineno)
            else:
                raise PlanError(f"line {lineno}: unknown task command {tokens[0]!r}")
            continue
        if line.startswith("parameter"):
            if task_done or task_name is not None:
                raise PlanError(f"line {lineno}: parameters must come before the task block")
            if not line.endswith(";"):
                raise PlanError(f"line {lineno}: parameter line must end with ';'")
            param = _parse_parameter(_tokens(line[:-1], lineno), lineno)
            if param.name in seen:
                raise PlanError(f"line {lineno}: duplicate parameter {param.name!r}")
            seen.add(param.name)
            parameters.append(param)
            continue
        tokens = _tokens(line, lineno)
        if tokens[:1] == ["task"]:
            if task_done:
                raise PlanError(f"line {lineno}: only one task block is allowed")
            if len(tokens) != 2 or not _NAME_RE.match(tokens[1]):
                raise PlanError(f"line {lineno}: expected 'task NAME'")
            task_name = tokens[1]
            in_task = True
            continue
        raise PlanError(f"line {lineno}: unrecognized line {line!r}")
    if in_task:
        raise PlanError("task block is missing its endtask")
    if not task_done or task_name is None:
        raise PlanError("plan has no task block")
    if not commands:
        raise PlanError("task block has no commands")
    resolvable = seen | set(BUILTINS)
    for cmd, lineno in zip(commands, command_lines):
        for template in _command_templates(cmd):
            try:
                refs = _refs(template)
            except PlanError as exc:
                raise PlanError(f"line {lineno}: {exc}") from None
            for name in sorted(refs - resolvable):
                raise PlanError(f"line {lineno}: unknown variable '{name}' in {template!r}")
    return PlanDocument(parameters=tuple(parameters), task_name=task_name,
                        commands=tuple(commands))


# ---------------------------------------------------------------------------
# printing (the inverse of parsing, up to whitespace)


def _quote(token: str) -> str:
    if _PLAIN_TOKEN_RE.match(token):
        return token
    return shlex.quote(token)


def format_plan(doc: PlanDocument) -> str:
    lines: list[str] = []
    for param in doc.parameters:
        if isinstance(param.spec, RangeSpec):
            lines.append(
                f"parameter {param.name} integer range from {param.spec.lo}"
                f" to {param.spec.hi} step {param.spec.step};"
            )
        else:
            lines.append(f"parameter {param.name} integer default {param.spec.value};")
    lines.append(f"task {doc.task_name}")
    for cmd in doc.commands:
        if isinstance(cmd, CopyToNode):
            lines.append(f"    copy {_quote(cmd.src_template)} node:{_quote(cmd.dst)}")
        elif isinstance(cmd, Execute):
            tokens = (cmd.program_template, *cmd.arg_templates)
            lines.append("    node:execute " + " ".join(_quote(t) for t in tokens))
        else:
            lines.append(f"    copy node:{_quote(cmd.src)} {_quote(cmd.dst_template)}")
    lines.append("endtask")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# substitution and expansion


def substitute(template: str, bindings: Mapping[str, str]) -> str:
    """Replace $name and ${name}; values go in literally, never re-expanded."""
    out: list[str] = []
    pos = 0
    for match in _REF_RE.finditer(template):
        before = template[pos:match.start()]
        if "$" in before:
            raise PlanError(f"stray '$' in {template!r}")
        out.append(before)
        name = match.group(1) or match.group(2)
        value = bindings.get(name)
        if value is None:
            raise PlanError(f"unknown variable '{name}' in {template!r}")
        out.append(value)
        pos = match.end()
    tail = template[pos:]
    if "$" in tail:
        raise PlanError(f"stray '$' in {template!r}")
    out.append(tail)
    return "".join(out)


def expand(doc: PlanDocument, cap: int = MAX_JOBS) -> list[SweepPoint]:
    """One point per combination, first-declared parameter slowest-varying."""
    total = 1
    for param in doc.parameters:
        total *= len(param.values)
    if total > cap:
        raise PlanError(f"plan expands to {total} jobs, cap is {cap}")
    width = len(str(total))
    points: list[SweepPoint] = []
    for index, combo in enumerate(product(*(p.values for p in doc.parameters))):
        points.append(SweepPoint(
            jobname=f"j{index:0{width}d}",
            bindings=tuple((param.name, str(value))
                           for param, value in zip(doc.parameters, combo)),
        ))
    return points


def output_destinations(doc: PlanDocument, point: SweepPoint,
                        variables: Mapping[str, str] | None = None) -> dict[str, str]:
    """Node-side output name -> local destination, per copy-from command."""
    mapping = point.mapping(variables)
    return {
        substitute(cmd.src, mapping): substitute(cmd.dst_template, mapping)
        for cmd in doc.commands if isinstance(cmd, CopyFromNode)
    }


def _default_reader(program_dir: str) -> Callable[[str], bytes]:
    root = os.path.realpath(program_dir)

    def read(name: str) -> bytes:
        path = os.path.realpath(os.path.join(root, name))
        if path != root and not path.startswith(root + os.sep):
            raise PlanError(f"plan file {name!r} escapes the program directory")
        try:
            with open(path, "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise PlanError(f"plan file {name!r} not found in {program_dir}") from None

    return read


def to_jobspecs(doc: PlanDocument, points: Iterable[SweepPoint], program_dir: str,
                variables: Mapping[str, str] | None = None,
                file_reader: Callable[[str], bytes] | None = None) -> list[JobSpec]:
    """One concrete JobSpec per point; copy sources read from program_dir."""
    read = file_reader or _default_reader(program_dir)
    cache: dict[str, bytes] = {}
    specs: list[JobSpec] = []
    for point in points:
        mapping = point.mapping(variables)
        inputs: list[NamedBlob] = []
        program: str | None = None
        args: tuple[str, ...] = ()
        expected: list[str] = []
        for cmd in doc.commands:
            if isinstance(cmd, CopyToNode):
                local = substitute(cmd.src_template, mapping)
                if local not in cache:
                    cache[local] = read(local)
                inputs.append(NamedBlob(name=substitute(cmd.dst, mapping),
                                        data=cache[local]))
            elif isinstance(cmd, Execute):
                program = substitute(cmd.program_template, mapping)
                args = tuple(substitute(a, mapping) for a in cmd.arg_templates)
            else:
                expected.append(substitute(cmd.src, mapping))
        if program is None:
            raise PlanError("plan has no node:execute command")
        specs.append(JobSpec(
            job_name=point.jobname, program=program, args=args,
            input_files=tuple(inputs), expected_outputs=tuple(expected),
            platform_hint=(variables or {}).get("OS", ""),
        ))
    return specs
