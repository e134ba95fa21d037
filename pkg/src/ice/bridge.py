"""HTTP + server-sent-events gateway for the operator console.

The bridge is a control-channel client plus mirror-store reader. One
poller refreshes a cached ecosystem snapshot (default every 500 ms); HTTP
handlers read the cache, steering POSTs forward over the control channel
under the "console" principal, and an event hub fans status/measurement
deltas plus heartbeats out to any number of SSE subscribers. The bridge
holds no state beyond that cache: restarting it never touches the
instrument or the stores.

Endpoints: GET /api/status, POST /api/command, GET /api/events,
GET /api/measurements/{id}/preview, plus optional static file serving for
the console bundle.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import queue
import threading
import time
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import client, datachannel, instrument, wire

log = logging.getLogger(__name__)

DEFAULT_POLL_MS = 500
DEFAULT_HEARTBEAT_S = 15.0
RECENT_LIMIT = 50

# total mapping from wire error codes to HTTP statuses
ERROR_HTTP_STATUS = {
    wire.E_NOT_FOUND: 404,
    wire.E_INVALID_PARAMS: 400,
    wire.E_OUT_OF_RANGE: 400,
    wire.E_POLICY_DENIED: 403,
    wire.E_INSTRUMENT_BUSY: 409,
    wire.E_UNAUTHENTICATED: 401,
    wire.E_INTERNAL: 500,
}

COMMAND_METHODS = frozenset({"set_probe_position", "start_scan", "abort_scan"})


def render_preview(frame: np.ndarray) -> bytes:
    """Binary PGM (P5), min-max normalized to 8 bit; flat frames mid-gray."""
    h, w = frame.shape
    lo = int(frame.min())
    hi = int(frame.max())
    if hi == lo:
        body = np.full((h, w), 128, dtype=np.uint8)
    else:
        scaled = (frame.astype(np.float64) - lo) * 255.0 / (hi - lo)
        body = np.rint(scaled).astype(np.uint8)
    return f"P5 {w} {h} 255\n".encode("ascii") + body.tobytes()


class EventHub:
    """Broadcasts (event, data) pairs to every subscriber in one order."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queues: list[queue.Queue] = []

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._queues.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._queues:
                self._queues.remove(q)

    def publish(self, event: str, data: dict) -> None:
        with self._lock:
            for q in self._queues:
                q.put((event, data))

    @property
    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._queues)


class Bridge:
    def __init__(
        self,
        mirror_dir,
        registry: str | None = None,
        instrument_endpoint: str | None = None,
        object_name: str = "u200.microscope",
        host: str = "127.0.0.1",
        port: int = 0,
        poll_ms: int = DEFAULT_POLL_MS,
        heartbeat_s: float = DEFAULT_HEARTBEAT_S,
        static_dir=None,
        principal: str = "console",
    ):
        if registry is None and instrument_endpoint is None:
            raise ValueError("bridge needs a registry endpoint or an instrument endpoint")
        self.mirror_dir = Path(mirror_dir)
        self.object_name = object_name
        self.registry = registry
        self.poll_ms = poll_ms
        self.heartbeat_s = heartbeat_s
        self.static_dir = Path(static_dir) if static_dir else None
        self.principal = principal
        self.hub = EventHub()
        self._proxy = client.Proxy(
            object_name,
            registry=registry,
            endpoint=instrument_endpoint,
            principal=principal,
            timeout_ms=5000,
        )
        self._snapshot: dict = {}
        self._snapshot_lock = threading.Lock()
        self._closing = threading.Event()
        self._wake = threading.Event()
        self._threads: list[threading.Thread] = []
        self._http = _make_http_server(self, host, port)

    # -- lifecycle ---------------------------------------------------------

    @property
    def endpoint(self) -> str:
        host, port = self._http.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.endpoint}"

    def start(self) -> "Bridge":
        self._store_snapshot(self._poll_once())
        for name, target in (
            ("bridge-poller", self._poll_loop),
            ("bridge-heartbeat", self._heartbeat_loop),
            ("bridge-http", self._http.serve_forever),
        ):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)
        log.info("bridge on %s (mirror %s)", self.url, self.mirror_dir)
        return self

    def stop(self) -> None:
        self._closing.set()
        self._http.shutdown()
        self._http.server_close()
        for thread in self._threads:
            thread.join(timeout=5.0)
        self._threads.clear()

    # -- snapshot assembly ---------------------------------------------------

    def snapshot(self) -> dict:
        with self._snapshot_lock:
            return self._snapshot

    def _store_snapshot(self, snap: dict) -> None:
        with self._snapshot_lock:
            self._snapshot = snap

    def _poll_once(self) -> dict:
        snap = {
            "timestamp": time.time(),
            "object": self.object_name,
            "instrument": self._poll_instrument(),
            "registry": self._poll_registry(),
            "sync": datachannel.load_sync_report(self.mirror_dir),
            "measurements": self._scan_mirror(),
        }
        return snap

    def _poll_instrument(self) -> dict:
        try:
            return {
                "ok": True,
                "scan_status": self._proxy.invoke("scan_status"),
                "probe_position": self._proxy.invoke("get_probe_position"),
                "metadata": self._proxy.invoke("metadata"),
            }
        except (client.ClientError, OSError) as exc:
            return {"ok": False, "error": str(exc)}

    def _poll_registry(self) -> dict:
        if self.registry is None:
            return {"ok": True, "records": []}
        try:
            records = client.raw_invoke(
                self.registry, "registry", "list", {"prefix": ""}, self.principal
            )
            return {"ok": True, "records": records}
        except (client.ClientError, OSError) as exc:
            return {"ok": False, "error": str(exc)}

    def _scan_mirror(self) -> list[dict]:
        if not self.mirror_dir.is_dir():
            return []
        entries = []
        for path in self.mirror_dir.rglob(f"*{instrument.MEASUREMENT_SUFFIX}"):
            if not path.is_file():
                continue
            stat = path.stat()
            entries.append((stat.st_mtime, path))
        entries.sort(key=lambda item: (-item[0], item[1].name))
        out = []
        for mtime, path in entries[:RECENT_LIMIT]:
            file_id = path.relative_to(self.mirror_dir).as_posix()
            sidecar_path = path.with_name(
                path.name[: -len(instrument.MEASUREMENT_SUFFIX)] + instrument.SIDECAR_SUFFIX
            )
            sidecar = None
            if sidecar_path.is_file():
                try:
                    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
                except (OSError, ValueError):
                    sidecar = None
            out.append(
                {
                    "file_id": file_id,
                    "size_bytes": path.stat().st_size,
                    "modified_at": mtime,
                    "sidecar": sidecar,
                }
            )
        return out

    # -- background loops ----------------------------------------------------

    def _poll_loop(self) -> None:
        while not self._closing.is_set():
            self._wake.wait(self.poll_ms / 1000.0)
            self._wake.clear()
            if self._closing.is_set():
                return
            previous = self.snapshot()
            current = self._poll_once()
            self._store_snapshot(current)
            self._emit_deltas(previous, current)

    def _emit_deltas(self, previous: dict, current: dict) -> None:
        if previous.get("instrument") != current.get("instrument"):
            self.hub.publish("status", current)
        old_ids = {m["file_id"] for m in previous.get("measurements", [])}
        for entry in current.get("measurements", []):
            if entry["file_id"] not in old_ids:
                self.hub.publish("measurement", entry)

    def _heartbeat_loop(self) -> None:
        while not self._closing.wait(self.heartbeat_s):
            self.hub.publish("heartbeat", {"timestamp": time.time()})

    def refresh_now(self) -> None:
        self._wake.set()

    # -- command forwarding ----------------------------------------------------

    def command(self, body: dict) -> tuple[int, dict]:
        """Forward one steering command; returns (http_status, response body)."""
        if not isinstance(body, dict):
            return 400, _error_body(wire.E_INVALID_PARAMS, "body must be a JSON object")
        method = body.get("method")
        params = body.get("params", {})
        if method not in COMMAND_METHODS:
            return 400, _error_body(
                wire.E_INVALID_PARAMS,
                f"method must be one of {sorted(COMMAND_METHODS)}",
            )
        if not isinstance(params, dict):
            return 400, _error_body(wire.E_INVALID_PARAMS, "params must be a map")
        try:
            result = self._proxy.invoke(method, params)
        except client.RemoteError as exc:
            return ERROR_HTTP_STATUS.get(exc.code, 500), _error_body(exc.code, exc.message)
        except (client.ClientError, OSError) as exc:
            return 502, _error_body(wire.E_INTERNAL, f"control channel failure: {exc}")
        self.refresh_now()
        return 200, {"result": result}

    def preview(self, file_id: str) -> tuple[int, bytes, str]:
        """Returns (status, body, content_type) for a preview request."""
        try:
            rel = datachannel.safe_file_id(file_id)
        except wire.IceError:
            return 404, b"bad file id", "text/plain"
        path = self.mirror_dir / rel
        if not path.is_file():
            return 404, f"no measurement {file_id!r}".encode(), "text/plain"
        try:
            frame = instrument.read_measurement(path)
        except (ValueError, OSError) as exc:
            return 422, f"unparseable measurement: {exc}".encode(), "text/plain"
        return 200, render_preview(frame), "image/x-portable-graymap"


def _error_body(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


def _make_http_server(bridge: Bridge, host: str, port: int) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "ice-bridge/0.1"

        # -- plumbing ------------------------------------------------------

        def log_message(self, fmt, *args):
            log.debug("http %s %s", self.address_string(), fmt % args)

        def _send_json(self, status: int, body: dict) -> None:
            payload = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self._cors()
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _send_bytes(self, status: int, body: bytes, content_type: str) -> None:
            self.send_response(status)
            self._cors()
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _cors(self) -> None:
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")

        # -- methods ---------------------------------------------------------

        def do_OPTIONS(self) -> None:
            self.send_response(204)
            self._cors()
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self) -> None:
            path = urllib.parse.unquote(urllib.parse.urlsplit(self.path).path)
            if path == "/api/status":
                snap = bridge.snapshot()
                status = 200 if snap.get("instrument", {}).get("ok") else 503
                self._send_json(status, snap)
            elif path == "/api/events":
                self._stream_events()
            elif path.startswith("/api/measurements/") and path.endswith("/preview"):
                file_id = path[len("/api/measurements/") : -len("/preview")]
                status, body, ctype = bridge.preview(file_id)
                self._send_bytes(status, body, ctype)
            elif bridge.static_dir is not None:
                self._serve_static(path)
            else:
                self._send_json(404, _error_body(wire.E_NOT_FOUND, f"no route {path}"))

        def do_POST(self) -> None:
            path = urllib.parse.urlsplit(self.path).path
            if path != "/api/command":
                self._send_json(404, _error_body(wire.E_NOT_FOUND, f"no route {path}"))
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, OSError):
                self._send_json(400, _error_body(wire.E_INVALID_PARAMS, "body is not valid JSON"))
                return
            status, payload = bridge.command(body)
            self._send_json(status, payload)

        # -- SSE -------------------------------------------------------------

        def _stream_events(self) -> None:
            self.send_response(200)
            self._cors()
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "close")
            self.end_headers()
            subscription = bridge.hub.subscribe()
            try:
                self._write_event("status", bridge.snapshot())
                while not bridge._closing.is_set():
                    try:
                        event, data = subscription.get(timeout=0.5)
                    except queue.Empty:
                        continue
                    self._write_event(event, data)
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass  # client went away; end silently
            finally:
                bridge.hub.unsubscribe(subscription)
                self.close_connection = True

        def _write_event(self, event: str, data: dict) -> None:
            payload = f"event: {event}\ndata: {json.dumps(data)}\n\n".encode("utf-8")
            self.wfile.write(payload)
            self.wfile.flush()

        # -- static console bundle ---------------------------------------------

        def _serve_static(self, path: str) -> None:
            rel = path.lstrip("/") or "index.html"
            try:
                target = (bridge.static_dir / rel).resolve()
                root = bridge.static_dir.resolve()
                if root not in target.parents and target != root:
                    raise FileNotFoundError(rel)
                if target.is_dir():
                    target = target / "index.html"
                data = target.read_bytes()
            except (OSError, FileNotFoundError):
                self._send_json(404, _error_body(wire.E_NOT_FOUND, f"no route {path}"))
                return
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self._send_bytes(200, data, ctype)

    server = ThreadingHTTPServer((host, port), Handler)
    server.daemon_threads = True
    return server
