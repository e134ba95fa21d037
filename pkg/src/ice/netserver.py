"""Threaded TCP server core shared by the registry, control and store daemons.

Each daemon is a FrameServer with a channel tag, a policy engine and a
dispatch callable. Connections are gated at accept time (source address x
channel); admitted connections then run a read-dispatch-respond loop, one
frame at a time per connection, with any number of concurrent connections.
Shutdown stops accepting, lets in-flight requests finish and joins the
handler threads.
"""

from __future__ import annotations

import logging
import select
import socket
import socketserver
import threading
from typing import Callable

from . import wire

log = logging.getLogger(__name__)

# handler poll quantum: how often an idle connection checks for shutdown
_POLL_S = 0.2


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: FrameServer = self.server  # type: ignore[assignment]
        source = self.client_address[0]
        if not server.policy.permits_source(source, server.channel):
            log.info("%s: refused %s at accept (policy)", server.channel, source)
            return  # close without reading: firewall-style refusal
        sock: socket.socket = self.request
        while not server.closing.is_set():
            ready, _, _ = select.select([sock], [], [], _POLL_S)
            if not ready:
                continue
            try:
                request = wire.read_frame_socket(sock)
            except wire.ProtocolError as exc:
                log.warning("%s: dropping connection from %s: %s", server.channel, source, exc)
                return
            if request is None:
                return  # clean EOF
            if request.kind != wire.KIND_REQUEST:
                log.warning("%s: %s sent a non-request frame", server.channel, source)
                return
            response = server.dispatch(request, source)
            try:
                wire.write_frame_socket(sock, response)
            except OSError:
                return  # peer gave up; the request was still served


class FrameServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(
        self,
        host: str,
        port: int,
        channel: str,
        policy,
        dispatch: Callable[[wire.Message, str], wire.Message],
    ):
        self.channel = channel
        self.policy = policy
        self.dispatch = dispatch
        self.closing = threading.Event()
        self._thread: threading.Thread | None = None
        super().__init__((host, port), _FrameHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self.serve_forever, name=f"{self.channel}-server", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        """Refuse new work, finish in-flight requests, join handlers."""
        self.closing.set()
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None


class ObjectDispatcher:
    """Policy-checked dispatch onto a single named object's method table."""

    def __init__(self, object_name: str, table: dict, channel: str, policy):
        self.object_name = object_name
        self.table = table
        self.channel = channel
        self.policy = policy

    def __call__(self, request: wire.Message, source: str) -> wire.Message:
        from . import policy as policy_mod

        if self.policy.evaluate(request.principal, source, self.channel) != policy_mod.ALLOW:
            return wire.Message.fail(
                request.id,
                wire.E_POLICY_DENIED,
                f"principal {request.principal!r} denied on {self.channel} channel",
                principal=request.principal,
            )
        if request.object != self.object_name:
            return wire.Message.fail(
                request.id, wire.E_NOT_FOUND, f"unknown object {request.object!r}",
                principal=request.principal,
            )
        handler = self.table.get(request.method)
        if handler is None:
            return wire.Message.fail(
                request.id, wire.E_NOT_FOUND, f"unknown method {request.method!r}",
                principal=request.principal,
            )
        try:
            result = handler(request.params)
        except wire.IceError as exc:
            return wire.Message.fail(request.id, exc.code, exc.message, principal=request.principal)
        except Exception as exc:  # adapter bugs must not kill the server
            log.exception("%s.%s failed", self.object_name, request.method)
            return wire.Message.fail(
                request.id, wire.E_INTERNAL, f"{type(exc).__name__}: {exc}",
                principal=request.principal,
            )
        return wire.Message.ok(request.id, result, principal=request.principal)
