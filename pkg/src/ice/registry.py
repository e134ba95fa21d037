"""Name registry binding exposed object names to control endpoints.

The registry is an in-memory map with an optional JSON snapshot written on
every change and loaded at start. It serves the same frame protocol as
everything else (object "registry", methods register / lookup / list /
unregister) on its own channel tag.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import client, netserver, policy as policy_mod, wire
from .wire import E_INVALID_PARAMS, E_NOT_FOUND, IceError

log = logging.getLogger(__name__)

DEFAULT_PORT = 9090
REGISTRY_OBJECT = "registry"


@dataclass(frozen=True)
class NameRecord:
    name: str
    endpoint: str
    metadata: dict = field(default_factory=dict)
    registered_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "endpoint": self.endpoint,
            "metadata": dict(self.metadata),
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NameRecord":
        return cls(
            name=obj["name"],
            endpoint=obj["endpoint"],
            metadata=dict(obj.get("metadata") or {}),
            registered_at=float(obj.get("registered_at") or 0.0),
        )


class Registry:
    """Thread-safe name -> record map with replace-on-register semantics."""

    def __init__(self, snapshot_path=None):
        self._lock = threading.RLock()
        self._records: dict[str, NameRecord] = {}
        self._snapshot_path = Path(snapshot_path) if snapshot_path else None
        if self._snapshot_path and self._snapshot_path.exists():
            self._load_snapshot()

    def register(self, name: str, endpoint: str, metadata: dict | None = None) -> NameRecord:
        if not name or not isinstance(name, str):
            raise IceError(E_INVALID_PARAMS, "name must be a non-empty string")
        try:
            client.parse_endpoint(endpoint)
        except (ValueError, TypeError) as exc:
            raise IceError(E_INVALID_PARAMS, f"bad endpoint: {exc}") from exc
        record = NameRecord(name, endpoint, dict(metadata or {}), time.time())
        with self._lock:
            self._records[name] = record
            self._write_snapshot()
        return record

    def lookup(self, name: str) -> NameRecord:
        with self._lock:
            record = self._records.get(name)
        if record is None:
            raise IceError(E_NOT_FOUND, f"no record for {name!r}")
        return record

    def list(self, prefix: str = "") -> list[NameRecord]:
        with self._lock:
            names = sorted(n for n in self._records if n.startswith(prefix))
            return [self._records[n] for n in names]

    def unregister(self, name: str) -> None:
        with self._lock:
            if self._records.pop(name, None) is not None:
                self._write_snapshot()

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def _write_snapshot(self) -> None:
        if self._snapshot_path is None:
            return
        doc = {name: rec.to_dict() for name, rec in sorted(self._records.items())}
        tmp = self._snapshot_path.with_name(
            self._snapshot_path.name + f".tmp-{uuid.uuid4().hex[:8]}"
        )
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self._snapshot_path)

    def _load_snapshot(self) -> None:
        try:
            doc = json.loads(self._snapshot_path.read_text(encoding="utf-8"))
            self._records = {name: NameRecord.from_dict(rec) for name, rec in doc.items()}
            log.info("registry snapshot loaded: %d records", len(self._records))
        except (OSError, ValueError, KeyError) as exc:
            log.warning("ignoring unreadable registry snapshot %s: %s", self._snapshot_path, exc)
            self._records = {}

    # -- wire adapter -------------------------------------------------------

    def dispatch_table(self) -> dict:
        return {
            "register": self._cmd_register,
            "lookup": self._cmd_lookup,
            "list": self._cmd_list,
            "unregister": self._cmd_unregister,
        }

    def _cmd_register(self, params: dict):
        name = params.get("name")
        endpoint = params.get("endpoint")
        metadata = params.get("metadata") or {}
        if not isinstance(metadata, dict):
            raise IceError(E_INVALID_PARAMS, "metadata must be a map")
        return self.register(name, endpoint, metadata).to_dict()

    def _cmd_lookup(self, params: dict):
        return self.lookup(_name_param(params)).to_dict()

    def _cmd_list(self, params: dict):
        prefix = params.get("prefix", "")
        if not isinstance(prefix, str):
            raise IceError(E_INVALID_PARAMS, "prefix must be a string")
        return [rec.to_dict() for rec in self.list(prefix)]

    def _cmd_unregister(self, params: dict):
        self.unregister(_name_param(params))
        return True


def _name_param(params: dict) -> str:
    name = params.get("name")
    if not name or not isinstance(name, str):
        raise IceError(E_INVALID_PARAMS, "name must be a non-empty string")
    return name


class RegistryServer:
    """TCP daemon serving a Registry over the registry channel."""

    def __init__(self, host="127.0.0.1", port=DEFAULT_PORT, snapshot_path=None, policy=None):
        self.registry = Registry(snapshot_path)
        self.policy = policy or policy_mod.PolicyEngine.allow_all()
        dispatch = netserver.ObjectDispatcher(
            REGISTRY_OBJECT, self.registry.dispatch_table(), policy_mod.CHANNEL_REGISTRY, self.policy
        )
        self.server = netserver.FrameServer(
            host, port, policy_mod.CHANNEL_REGISTRY, self.policy, dispatch
        )

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    def start(self) -> "RegistryServer":
        self.server.start()
        log.info("registry listening on %s", self.endpoint)
        return self

    def stop(self) -> None:
        self.server.stop()


class RegistryClient:
    """Convenience wrapper for talking to a remote registry."""

    def __init__(self, endpoint: str, principal: str = "anonymous",
                 timeout_ms: int = client.DEFAULT_TIMEOUT_MS):
        self.endpoint = endpoint
        self.principal = principal
        self.timeout_ms = timeout_ms

    def _call(self, method: str, params: dict):
        return client.raw_invoke(
            self.endpoint, REGISTRY_OBJECT, method, params, self.principal, self.timeout_ms
        )

    def register(self, name: str, endpoint: str, metadata: dict | None = None) -> dict:
        return self._call("register", {"name": name, "endpoint": endpoint, "metadata": metadata or {}})

    def lookup(self, name: str) -> dict:
        return self._call("lookup", {"name": name})

    def list(self, prefix: str = "") -> list[dict]:
        return self._call("list", {"prefix": prefix})

    def unregister(self, name: str) -> None:
        self._call("unregister", {"name": name})
