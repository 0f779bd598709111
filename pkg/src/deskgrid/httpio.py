"""Shared HTTP plumbing: a tiny routed server and a typed client call.

Every service speaks the same dialect: request and response bodies are
wire envelopes, errors come back as an ``error-reply`` envelope with the
mapped status code. Addresses are ``host:port`` strings.
"""

from __future__ import annotations

import logging
import re
import socket
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from deskgrid.errors import (
    DeskgridError,
    EnvelopeError,
    UnreachableError,
    error_for_code,
    status_for,
)
from deskgrid.wire import ErrorReply, decode_envelope, encode_envelope

log = logging.getLogger(__name__)

# fn(path_params, request_message_or_None) -> reply message, or (status, reply)
RouteFn = Callable[[dict[str, str], Any], Any]


def _compile(pattern: str) -> re.Pattern:
    parts = []
    for seg in pattern.strip("/").split("/"):
        if seg.startswith("{") and seg.endswith("}"):
            parts.append(f"(?P<{seg[1:-1]}>[^/]+)")
        else:
            parts.append(re.escape(seg))
    return re.compile("^/" + "/".join(parts) + "$")


class ApiServer:
    """ThreadingHTTPServer wrapper dispatching envelope-typed routes."""

    def __init__(self, routes: list[tuple[str, str, RouteFn]], host: str = "127.0.0.1",
                 port: int = 0, name: str = "api") -> None:
        self._routes = [(method, _compile(pattern), fn) for method, pattern, fn in routes]
        self._host = host
        self._port = port
        self._name = name
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        if self._httpd is None:
            raise DeskgridError(f"{self._name} server not started")
        return f"{self._host}:{self._httpd.server_address[1]}"

    def start(self) -> "ApiServer":
        routes = self._routes
        name = self._name

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt: str, *args: Any) -> None:
                log.debug("%s %s", name, fmt % args)

            def _reply(self, status: int, message: Any) -> None:
                body = encode_envelope(message)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _dispatch(self, method: str) -> None:
                parsed = urllib.parse.urlsplit(self.path)
                for want, regex, fn in routes:
                    if want != method:
                        continue
                    match = regex.match(parsed.path)
                    if match is None:
                        continue
                    params = dict(match.groupdict())
                    for key, values in urllib.parse.parse_qs(parsed.query).items():
                        params.setdefault(key, values[0])
                    try:
                        length = int(self.headers.get("Content-Length") or 0)
                        request = decode_envelope(self.rfile.read(length)) if length else None
                        outcome = fn(params, request)
                    except DeskgridError as exc:
                        self._reply(status_for(exc), ErrorReply(code=exc.code, message=str(exc)))
                        return
                    except Exception as exc:
                        log.exception("%s: unhandled error on %s %s", name, method, self.path)
                        self._reply(500, ErrorReply(code="internal", message=repr(exc)))
                        return
                    if isinstance(outcome, tuple):
                        status, message = outcome
                    else:
                        status, message = 200, outcome
                    self._reply(status, message)
                    return
                self._reply(404, ErrorReply(code="not-found", message=f"no route for {self.path}"))

            def do_GET(self) -> None:
                self._dispatch("GET")

            def do_POST(self) -> None:
                self._dispatch("POST")

        self._httpd = ThreadingHTTPServer((self._host, self._port), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name=f"{self._name}-http", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None


def call(address: str, method: str, path: str, message: Any = None,
         timeout: float = 10.0) -> Any:
    """One envelope round trip; raises the typed error the peer replied with."""
    url = f"http://{address}{path}"
    body = encode_envelope(message) if message is not None else None
    request = urllib.request.Request(
        url, data=body, method=method, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request, timeout=timeout) as resp:
            return decode_envelope(resp.read())
    except urllib.error.HTTPError as exc:
        raw = exc.read()
        try:
            reply = decode_envelope(raw)
        except EnvelopeError:
            raise DeskgridError(f"{url} replied {exc.code}: {raw[:200]!r}") from None
        if isinstance(reply, ErrorReply):
            raise error_for_code(reply.code, reply.message) from None
        raise DeskgridError(f"{url} replied {exc.code} with {type(reply).__name__}") from None
    except (urllib.error.URLError, ConnectionError, socket.timeout, TimeoutError) as exc:
        raise UnreachableError(f"{url} unreachable: {exc}") from None


def wait_ready(address: str, path: str = "/api/ping", timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            call(address, "GET", path, timeout=2.0)
            return
        except DeskgridError:
            if time.monotonic() >= deadline:
                raise UnreachableError(f"{address} not ready after {timeout:.0f}s") from None
            time.sleep(0.05)
