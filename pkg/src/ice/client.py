"""Remote-side control-channel client: connections, proxies, invocation.

A Proxy resolves its object name through the registry, then sends one
request per invoke over a fresh connection. Resolution is retried at most
once per call, and only for failures that happen before the request hits
the wire, so a mutating command is never sent twice.
"""

from __future__ import annotations

import logging
import socket
import uuid

from . import wire

log = logging.getLogger(__name__)

REGISTRY_OBJECT = "registry"
DEFAULT_TIMEOUT_MS = 5000


class ClientError(Exception):
    """Base class for client-side invocation failures."""


class ConnectError(ClientError):
    """TCP connection could not be established (or was refused by policy)."""


class CallTimeout(ClientError):
    """No response within the proxy timeout; the server may still finish."""


class RemoteError(ClientError):
    """Server-side ErrorInfo surfaced to the caller."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def new_request_id() -> str:
    return uuid.uuid4().hex


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint {endpoint!r} is not host:port")
    port_no = int(port)
    if not 0 < port_no < 65536:
        raise ValueError(f"endpoint port {port_no} out of range")
    return host, port_no


class Connection:
    """One TCP connection speaking the frame protocol; reusable per call."""

    def __init__(self, endpoint: str, timeout_ms: int = DEFAULT_TIMEOUT_MS, principal: str = "anonymous"):
        self.endpoint = endpoint
        self.timeout_ms = timeout_ms
        self.principal = principal
        self._sock: socket.socket | None = None

    def open(self) -> "Connection":
        if self._sock is not None:
            return self
        host, port = parse_endpoint(self.endpoint)
        try:
            sock = socket.create_connection((host, port), timeout=self.timeout_ms / 1000.0)
        except OSError as exc:
            raise ConnectError(f"cannot connect to {self.endpoint}: {exc}") from exc
        sock.settimeout(self.timeout_ms / 1000.0)
        self._sock = sock
        return self

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> "Connection":
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()

    def call(self, object_name: str, method: str, params: dict | None = None):
        """Send one request and wait for its response; returns the result."""
        self.open()
        request = wire.Message.request(
            new_request_id(), object_name, method, params, principal=self.principal
        )
        sock = self._sock
        try:
            wire.write_frame_socket(sock, request)
        except OSError as exc:
            self.close()
            raise ConnectError(f"send to {self.endpoint} failed: {exc}") from exc
        try:
            response = wire.read_frame_socket(sock)
        except socket.timeout as exc:
            self.close()
            raise CallTimeout(
                f"{object_name}.{method} on {self.endpoint}: no response in {self.timeout_ms} ms"
            ) from exc
        except (OSError, wire.ProtocolError) as exc:
            self.close()
            raise ConnectError(f"connection to {self.endpoint} failed mid-call: {exc}") from exc
        if response is None:
            self.close()
            raise ConnectError(f"{self.endpoint} closed the connection (policy or shutdown)")
        if response.id != request.id:
            self.close()
            raise ClientError(f"response id {response.id!r} does not match request")
        if response.status == wire.STATUS_ERROR:
            raise RemoteError(response.error.code, response.error.message)
        return response.result


def raw_invoke(
    endpoint: str,
    object_name: str,
    method: str,
    params: dict | None = None,
    principal: str = "anonymous",
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
):
    """One-shot invoke against an explicit endpoint (no registry involved)."""
    with Connection(endpoint, timeout_ms, principal) as conn:
        return conn.call(object_name, method, params)


def registry_lookup(registry_endpoint: str, name: str, principal: str = "anonymous",
                    timeout_ms: int = DEFAULT_TIMEOUT_MS) -> dict:
    return raw_invoke(
        registry_endpoint, REGISTRY_OBJECT, "lookup", {"name": name}, principal, timeout_ms
    )


class Proxy:
    """Client-side handle on one exposed object.

    Use one proxy per caller; each invoke opens its own connection, so
    several proxies in one process can run concurrently.
    """

    def __init__(
        self,
        object_name: str,
        registry: str | None = None,
        endpoint: str | None = None,
        principal: str = "anonymous",
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
    ):
        if registry is None and endpoint is None:
            raise ValueError("proxy needs a registry endpoint or an explicit endpoint")
        self.object_name = object_name
        self.registry = registry
        self.principal = principal
        self.timeout_ms = timeout_ms
        self._endpoint = endpoint
        self._pinned = registry is None  # explicit endpoint, nothing to refresh

    @property
    def endpoint(self) -> str | None:
        return self._endpoint

    def resolve(self, force: bool = False) -> str:
        if self._endpoint is not None and not force:
            return self._endpoint
        if self.registry is None:
            return self._endpoint
        record = registry_lookup(self.registry, self.object_name, self.principal, self.timeout_ms)
        self._endpoint = record["endpoint"]
        return self._endpoint

    def invoke(self, method: str, params: dict | None = None):
        """Invoke with at-most-once semantics.

        A connect failure (before any bytes of the request are written)
        triggers one registry re-resolve and one retry; a NotFound response
        retries only if the registry now maps the object elsewhere. Every
        other failure, including timeout, surfaces directly.
        """
        endpoint = self.resolve()
        try:
            conn = Connection(endpoint, self.timeout_ms, self.principal).open()
        except ConnectError:
            if self._pinned:
                raise
            refreshed = self.resolve(force=True)
            conn = Connection(refreshed, self.timeout_ms, self.principal).open()
        try:
            return conn.call(self.object_name, method, params)
        except RemoteError as exc:
            if exc.code == wire.E_NOT_FOUND and not self._pinned:
                refreshed = self.resolve(force=True)
                if refreshed != endpoint:
                    # the object moved; safe to re-send, nothing executed
                    return raw_invoke(
                        refreshed, self.object_name, method, params,
                        self.principal, self.timeout_ms,
                    )
            raise
        finally:
            conn.close()


def invoke(proxy: Proxy, method: str, params: dict | None = None):
    return proxy.invoke(method, params)
