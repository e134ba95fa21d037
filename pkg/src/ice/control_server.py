"""Control-node daemon: exposes instrument adapters on the control channel.

Every dispatched request produces exactly one response and one audit entry.
Methods declared mutating at expose time run under that object's exclusive
guard, so the audit log restricted to one object's mutating calls replays
sequentially into the observed final instrument state; non-mutating reads
interleave freely.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field

from . import netserver, policy as policy_mod, registry as registry_mod, wire
from .wire import E_INTERNAL, E_INVALID_PARAMS, E_NOT_FOUND, E_POLICY_DENIED, IceError

log = logging.getLogger(__name__)

REGISTRAR_PRINCIPAL = "control-server"


@dataclass
class Exposure:
    object_name: str
    adapter: dict
    mutating_methods: frozenset
    metadata: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class AuditLog:
    """Append-only, gap-free record of every dispatched request.

    Entries are newline-delimited JSON when a path is configured, and are
    always retained in memory for inspection; appends are serialized
    through one writer lock.
    """

    def __init__(self, path=None):
        self._path = path
        self._lock = threading.Lock()
        self._seq = 0
        self._entries: list[dict] = []
        self._handle = open(path, "a", encoding="utf-8") if path else None

    def append(self, **fields) -> dict:
        with self._lock:
            self._seq += 1
            entry = {"sequence_no": self._seq, **fields}
            self._entries.append(entry)
            if self._handle is not None:
                self._handle.write(json.dumps(entry, sort_keys=True) + "\n")
                self._handle.flush()
        return entry

    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None


class ControlServer:
    """Accepts control-channel connections and dispatches to adapters."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        policy=None,
        registry_endpoint: str | None = None,
        audit_path=None,
        advertise_host: str | None = None,
    ):
        self.policy = policy or policy_mod.PolicyEngine.allow_all()
        self.registry_endpoint = registry_endpoint
        self.audit = AuditLog(audit_path)
        self._exposures: dict[str, Exposure] = {}
        self._exposure_lock = threading.Lock()
        self._advertise_host = advertise_host
        self._server = netserver.FrameServer(
            host, port, policy_mod.CHANNEL_CONTROL, self.policy, self.dispatch
        )
        self._started = False

    @property
    def endpoint(self) -> str:
        return self._server.endpoint

    @property
    def advertised_endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        if self._advertise_host:
            host = self._advertise_host
        elif host in ("0.0.0.0", ""):
            host = "127.0.0.1"
        return f"{host}:{port}"

    def expose(self, object_name: str, adapter, mutating_methods=(), metadata: dict | None = None) -> None:
        if not object_name or not isinstance(object_name, str):
            raise IceError(E_INVALID_PARAMS, "object name must be a non-empty string")
        mutating = frozenset(mutating_methods)
        unknown = mutating - set(adapter)
        if unknown:
            raise IceError(
                E_INVALID_PARAMS, f"mutating methods not in adapter table: {sorted(unknown)}"
            )
        with self._exposure_lock:
            if object_name in self._exposures:
                raise IceError(E_INVALID_PARAMS, f"object {object_name!r} already exposed")
            exposure = Exposure(object_name, adapter, mutating, dict(metadata or {}))
            self._exposures[object_name] = exposure
        if self._started:
            self._register(exposure)

    def dispatch(self, request: wire.Message, source: str) -> wire.Message:
        started = time.time()
        params = request.params or {}
        outcome = "Ok"
        try:
            if self.policy.evaluate(request.principal, source, policy_mod.CHANNEL_CONTROL) != policy_mod.ALLOW:
                outcome = E_POLICY_DENIED
                return wire.Message.fail(
                    request.id, E_POLICY_DENIED,
                    f"principal {request.principal!r} denied on control channel",
                    principal=request.principal,
                )
            exposure = self._exposures.get(request.object)
            if exposure is None:
                outcome = E_NOT_FOUND
                return wire.Message.fail(
                    request.id, E_NOT_FOUND, f"unknown object {request.object!r}",
                    principal=request.principal,
                )
            handler = exposure.adapter.get(request.method)
            if handler is None:
                outcome = E_NOT_FOUND
                return wire.Message.fail(
                    request.id, E_NOT_FOUND,
                    f"object {request.object!r} has no method {request.method!r}",
                    principal=request.principal,
                )
            try:
                if request.method in exposure.mutating_methods:
                    with exposure.lock:
                        result = handler(params)
                else:
                    result = handler(params)
            except IceError as exc:
                outcome = exc.code
                return wire.Message.fail(request.id, exc.code, exc.message, principal=request.principal)
            except Exception as exc:
                log.exception("adapter failure in %s.%s", request.object, request.method)
                outcome = E_INTERNAL
                return wire.Message.fail(
                    request.id, E_INTERNAL, f"{type(exc).__name__}: {exc}",
                    principal=request.principal,
                )
            return wire.Message.ok(request.id, result, principal=request.principal)
        finally:
            self.audit.append(
                request_id=request.id,
                principal=request.principal,
                object=request.object,
                method=request.method,
                params=params,
                outcome=outcome,
                started=started,
                finished=time.time(),
            )

    def start(self) -> "ControlServer":
        """Bind, serve, and advertise every exposure to the registry."""
        self._server.start()
        self._started = True
        try:
            with self._exposure_lock:
                exposures = list(self._exposures.values())
            for exposure in exposures:
                self._register(exposure)
        except Exception:
            self._server.stop()
            self._started = False
            raise
        log.info("control server on %s (%d objects)", self.endpoint, len(self._exposures))
        return self

    def stop(self) -> None:
        self._server.stop()
        self.audit.close()
        self._started = False

    def _register(self, exposure: Exposure) -> None:
        if self.registry_endpoint is None:
            return
        registry_mod.RegistryClient(self.registry_endpoint, principal=REGISTRAR_PRINCIPAL).register(
            exposure.object_name, self.advertised_endpoint, exposure.metadata
        )
        log.info("registered %s -> %s", exposure.object_name, self.advertised_endpoint)
