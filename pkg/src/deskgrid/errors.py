"""Exception hierarchy shared by every component.

Each error carries a stable ``code`` string that survives the HTTP boundary:
servers encode it into an error reply, clients map it back to the same
exception class.
"""

from __future__ import annotations


class DeskgridError(Exception):
    """Base class; ``code`` identifies the error kind on the wire."""

    code = "internal"


class ValidationError(DeskgridError):
    code = "validation"


class EnvelopeError(DeskgridError):
    """Malformed or undecodable message bytes."""

    code = "envelope"


class NotFoundError(DeskgridError):
    code = "not-found"


class DuplicateError(DeskgridError):
    code = "duplicate"


class ConflictError(DeskgridError):
    code = "conflict"


class IntegrityError(DeskgridError):
    """Content hash mismatch or corrupted payload."""

    code = "integrity"


class BusyError(DeskgridError):
    """Executor has no free slot for a pushed thread."""

    code = "busy"


class StateError(DeskgridError):
    """Illegal thread lifecycle transition."""

    code = "state"


class UnreachableError(DeskgridError):
    """Peer could not be contacted (connection, DNS, timeout)."""

    code = "unreachable"


_CODE_MAP = {
    cls.code: cls
    for cls in (
        ValidationError,
        EnvelopeError,
        NotFoundError,
        DuplicateError,
        ConflictError,
        IntegrityError,
        BusyError,
        StateError,
        UnreachableError,
        DeskgridError,
    )
}

HTTP_STATUS = {
    "validation": 400,
    "envelope": 400,
    "not-found": 404,
    "duplicate": 409,
    "conflict": 409,
    "state": 409,
    "integrity": 422,
    "busy": 503,
    "unreachable": 502,
    "internal": 500,
}


def error_for_code(code: str, message: str) -> DeskgridError:
    """Rebuild the typed exception a server encoded into an error reply."""
    cls = _CODE_MAP.get(code, DeskgridError)
    return cls(message)


def status_for(err: DeskgridError) -> int:
    return HTTP_STATUS.get(err.code, 500)
