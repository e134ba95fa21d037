"""Data channel: instrument-side store server and remote-side sync client.

The store publishes a manifest (every regular file under the store
directory, with size and SHA-256) and serves 1 MiB chunks, both over the
shared frame protocol on the data channel (chunk bytes ride base64 inside
the JSON payload). The sync client mirrors the store by digest diff:
files are fetched to a temporary name, verified, and renamed into place,
so a mirror reader never sees a partial file and a convergent mirror
transfers zero bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath

from . import client, netserver, policy as policy_mod
from .wire import E_INTERNAL, E_INVALID_PARAMS, E_NOT_FOUND, E_OUT_OF_RANGE, IceError

log = logging.getLogger(__name__)

CHUNK_SIZE = 1024 * 1024
STORE_OBJECT = "store"
SYNC_REPORT_NAME = ".ice-sync-report.json"
TRANSFER_RETRIES = 2  # retries after the first failed attempt


@dataclass(frozen=True)
class MeasurementRecord:
    file_id: str
    size_bytes: int
    sha256: str
    modified_at: float
    sidecar: str | None = None

    def to_dict(self) -> dict:
        return {
            "file_id": self.file_id,
            "size_bytes": self.size_bytes,
            "sha256": self.sha256,
            "modified_at": self.modified_at,
            "sidecar": self.sidecar,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MeasurementRecord":
        return cls(
            file_id=obj["file_id"],
            size_bytes=int(obj["size_bytes"]),
            sha256=obj["sha256"],
            modified_at=float(obj["modified_at"]),
            sidecar=obj.get("sidecar"),
        )


@dataclass
class Manifest:
    generation: int
    records: list[MeasurementRecord]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "records": [r.to_dict() for r in self.records],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Manifest":
        return cls(
            generation=int(obj["generation"]),
            records=[MeasurementRecord.from_dict(r) for r in obj["records"]],
            warnings=list(obj.get("warnings") or []),
        )


@dataclass
class SyncReport:
    files_examined: int = 0
    files_transferred: int = 0
    bytes_transferred: int = 0
    files_verified: int = 0
    mismatches: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "files_examined": self.files_examined,
            "files_transferred": self.files_transferred,
            "bytes_transferred": self.bytes_transferred,
            "files_verified": self.files_verified,
            "mismatches": list(self.mismatches),
        }


def hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        while True:
            block = handle.read(1024 * 1024)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def chunk_count(size_bytes: int) -> int:
    return (size_bytes + CHUNK_SIZE - 1) // CHUNK_SIZE


def safe_file_id(file_id: str) -> PurePosixPath:
    """Reject ids that could escape the store/mirror root."""
    if not file_id or not isinstance(file_id, str):
        raise IceError(E_INVALID_PARAMS, "file_id must be a non-empty string")
    rel = PurePosixPath(file_id)
    if rel.is_absolute() or ".." in rel.parts or file_id.startswith("~"):
        raise IceError(E_INVALID_PARAMS, f"file_id {file_id!r} escapes the store root")
    return rel


def build_manifest(store_dir, generation: int = 1) -> Manifest:
    """Walk store_dir, hash every regular file, return a sorted manifest."""
    root = Path(store_dir)
    if not root.is_dir():
        raise IceError(E_INTERNAL, f"store directory {root} is not a readable directory")
    records: list[MeasurementRecord] = []
    warnings: list[str] = []
    names: set[str] = set()

    def on_walk_error(exc: OSError) -> None:
        if Path(exc.filename or "") == root:
            raise IceError(E_INTERNAL, f"store directory {root} is not readable: {exc}")
        warnings.append(f"{exc.filename}: {exc}")

    for dirpath, dirnames, filenames in os.walk(root, onerror=on_walk_error):
        dirnames.sort()
        for filename in sorted(filenames):
            path = Path(dirpath) / filename
            if path.is_symlink() or not path.is_file():
                continue
            file_id = path.relative_to(root).as_posix()
            try:
                stat = path.stat()
                digest = hash_file(path)
            except OSError as exc:
                warnings.append(f"{file_id}: {exc}")
                continue
            names.add(file_id)
            records.append(
                MeasurementRecord(
                    file_id=file_id,
                    size_bytes=stat.st_size,
                    sha256=digest,
                    modified_at=stat.st_mtime,
                )
            )
    paired = []
    for record in records:
        sidecar = _sidecar_id(record.file_id) if record.file_id.endswith(".icem") else None
        if sidecar is not None and sidecar in names:
            record = MeasurementRecord(
                record.file_id, record.size_bytes, record.sha256, record.modified_at, sidecar
            )
        paired.append(record)
    paired.sort(key=lambda r: r.file_id)
    return Manifest(generation=generation, records=paired, warnings=warnings)


def _sidecar_id(file_id: str) -> str:
    return file_id[: -len(".icem")] + ".meta.json"


def read_chunk(path, index: int, size_bytes: int) -> bytes:
    total = chunk_count(size_bytes)
    if index < 0 or index >= total:
        raise IceError(
            E_OUT_OF_RANGE, f"chunk index {index} outside [0, {total}) for {size_bytes} bytes"
        )
    with open(path, "rb") as handle:
        handle.seek(index * CHUNK_SIZE)
        return handle.read(min(CHUNK_SIZE, size_bytes - index * CHUNK_SIZE))


class StoreServer:
    """Publishes one directory's manifest and chunks on the data channel.

    The manifest is rebuilt per request and swapped under a lock, so chunk
    readers always see a complete generation; the generation counter bumps
    only when the record list actually changed.
    """

    def __init__(self, store_dir, host="127.0.0.1", port=0, policy=None):
        self.store_dir = Path(store_dir)
        self.policy = policy or policy_mod.PolicyEngine.allow_all()
        self._lock = threading.Lock()
        self._manifest: Manifest | None = None
        dispatch = netserver.ObjectDispatcher(
            STORE_OBJECT,
            {"manifest": self._cmd_manifest, "get_chunk": self._cmd_get_chunk},
            policy_mod.CHANNEL_DATA,
            self.policy,
        )
        self.server = netserver.FrameServer(
            host, port, policy_mod.CHANNEL_DATA, self.policy, dispatch
        )

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    def start(self) -> "StoreServer":
        self.server.start()
        log.info("store server on %s serving %s", self.endpoint, self.store_dir)
        return self

    def stop(self) -> None:
        self.server.stop()

    def current_manifest(self) -> Manifest:
        fresh = build_manifest(self.store_dir)
        with self._lock:
            previous = self._manifest
            if previous is None:
                fresh.generation = 1
            elif fresh.records == previous.records:
                fresh.generation = previous.generation
            else:
                fresh.generation = previous.generation + 1
            self._manifest = fresh
            return fresh

    def _cmd_manifest(self, params: dict):
        return self.current_manifest().to_dict()

    def _cmd_get_chunk(self, params: dict):
        file_id = params.get("file_id")
        index = params.get("index")
        rel = safe_file_id(file_id)
        if isinstance(index, bool) or not isinstance(index, int):
            raise IceError(E_INVALID_PARAMS, "index must be an integer")
        with self._lock:
            manifest = self._manifest
        if manifest is None:
            manifest = self.current_manifest()
        record = next((r for r in manifest.records if r.file_id == file_id), None)
        if record is None:
            raise IceError(E_NOT_FOUND, f"{file_id!r} is not in the current manifest")
        path = self.store_dir / rel
        if not path.is_file():
            raise IceError(E_NOT_FOUND, f"store file {file_id!r} disappeared")
        data = read_chunk(path, index, record.size_bytes)
        return {
            "file_id": file_id,
            "index": index,
            "offset": index * CHUNK_SIZE,
            "size": len(data),
            "last": index == chunk_count(record.size_bytes) - 1,
            "data": base64.b64encode(data).decode("ascii"),
        }


class StoreClient:
    """Client half of the data channel; one connection, many calls."""

    def __init__(self, endpoint: str, principal: str = "sync", timeout_ms: int = 30000):
        self.endpoint = endpoint
        self.principal = principal
        self.timeout_ms = timeout_ms
        self._conn: client.Connection | None = None

    def _call(self, method: str, params: dict):
        if self._conn is None:
            self._conn = client.Connection(self.endpoint, self.timeout_ms, self.principal)
        try:
            return self._conn.call(STORE_OBJECT, method, params)
        except client.ClientError:
            self.close()
            raise

    def manifest(self) -> Manifest:
        return Manifest.from_dict(self._call("manifest", {}))

    def get_chunk(self, file_id: str, index: int) -> bytes:
        desc = self._call("get_chunk", {"file_id": file_id, "index": index})
        return base64.b64decode(desc["data"])

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def __enter__(self) -> "StoreClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def sync_once(
    remote_endpoint: str,
    local_dir,
    principal: str = "sync",
    timeout_ms: int = 30000,
    retries: int = TRANSFER_RETRIES,
) -> SyncReport:
    """Mirror the remote store into local_dir; transfer only digest diffs."""
    mirror = Path(local_dir)
    mirror.mkdir(parents=True, exist_ok=True)
    report = SyncReport()
    with StoreClient(remote_endpoint, principal, timeout_ms) as store:
        manifest = store.manifest()
        report.files_examined = len(manifest.records)
        for record in manifest.records:
            if record.file_id == SYNC_REPORT_NAME:
                log.warning("skipping remote file with reserved name %s", record.file_id)
                continue
            try:
                rel = safe_file_id(record.file_id)
            except IceError as exc:
                report.mismatches.append({"file_id": record.file_id, "error": exc.message})
                continue
            target = mirror / rel
            if target.is_file() and hash_file(target) == record.sha256:
                report.files_verified += 1
                continue
            if _fetch_file(store, record, target, retries):
                report.files_transferred += 1
                report.bytes_transferred += record.size_bytes
                report.files_verified += 1
            else:
                report.mismatches.append(
                    {"file_id": record.file_id, "error": "digest mismatch after retries"}
                )
    return report


def _fetch_file(store: StoreClient, record: MeasurementRecord, target: Path, retries: int) -> bool:
    target.parent.mkdir(parents=True, exist_ok=True)
    for _ in range(1 + retries):
        tmp = target.with_name(target.name + f".part-{uuid.uuid4().hex[:8]}")
        digest = hashlib.sha256()
        try:
            with open(tmp, "wb") as handle:
                for index in range(chunk_count(record.size_bytes)):
                    chunk = store.get_chunk(record.file_id, index)
                    digest.update(chunk)
                    handle.write(chunk)
            if digest.hexdigest() == record.sha256:
                os.replace(tmp, target)  # atomic visibility under the final name
                return True
            log.warning("digest mismatch fetching %s, retrying", record.file_id)
        finally:
            tmp.unlink(missing_ok=True)
    return False


def watch_and_sync(
    remote_endpoint: str,
    local_dir,
    interval_ms: int,
    principal: str = "sync",
    stop: threading.Event | None = None,
    report_name: str = SYNC_REPORT_NAME,
    on_report=None,
) -> None:
    """Run sync_once forever at the given interval; transient errors retry.

    The latest report (or error) is written atomically to
    local_dir/<report_name> so observers (e.g. the bridge) can surface it.
    """
    if interval_ms <= 0:
        raise ValueError("interval_ms must be positive")
    mirror = Path(local_dir)
    mirror.mkdir(parents=True, exist_ok=True)
    stop = stop or threading.Event()
    while not stop.is_set():
        doc: dict = {
            "at": datetime.now(timezone.utc).isoformat(),
            "remote": remote_endpoint,
        }
        try:
            report = sync_once(remote_endpoint, mirror, principal)
            doc.update(status="ok", report=report.to_dict(), error=None)
            if report.files_transferred:
                log.info(
                    "synced %d files (%d bytes) from %s",
                    report.files_transferred, report.bytes_transferred, remote_endpoint,
                )
        except Exception as exc:  # transient by contract: log and retry next tick
            log.warning("sync against %s failed: %s", remote_endpoint, exc)
            doc.update(status="error", report=None, error=str(exc))
        _write_report(mirror / report_name, doc)
        if on_report is not None:
            on_report(doc)
        stop.wait(interval_ms / 1000.0)


def _write_report(path: Path, doc: dict) -> None:
    tmp = path.with_name(path.name + f".tmp-{uuid.uuid4().hex[:8]}")
    try:
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        log.warning("could not write sync report %s: %s", path, exc)


def load_sync_report(mirror_dir, report_name: str = SYNC_REPORT_NAME) -> dict | None:
    path = Path(mirror_dir) / report_name
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None
