"""Deterministic simulated STEM microscope and its adapter dispatch table.

The simulator is a single state machine (Idle <-> Scanning) steered through
named commands. A completed scan synthesizes one frame and commits it to
the measurement store directory as an ICEM file plus a JSON sidecar.

Frame model: a square lattice of Gaussian peaks with lattice constant
width/8 px and peak sigma = lattice/6, amplitude 40000 over a background
of 1000, phase-shifted by (x*width, y*height) from the probe position.
Per-pixel integer noise uniform in [0, 256) comes from SplitMix64 keyed by
(seed, row-major pixel index); the degenerate 1x1 frame carries no noise.
The frame is a pure function of (ScanParameters, ProbePosition).

ICEM measurement file (bit-exact): magic "ICEM", one version byte (1),
u32 big-endian width, u32 big-endian height, then width*height u16
big-endian pixel values, row-major.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .wire import (
    E_INSTRUMENT_BUSY,
    E_INVALID_PARAMS,
    E_OUT_OF_RANGE,
    IceError,
)

log = logging.getLogger(__name__)

STATE_IDLE = "Idle"
STATE_SCANNING = "Scanning"

MEASUREMENT_MAGIC = b"ICEM"
MEASUREMENT_VERSION = 1
MEASUREMENT_SUFFIX = ".icem"
SIDECAR_SUFFIX = ".meta.json"

LATTICE_DIVISOR = 8
SIGMA_DIVISOR = 6
PEAK_AMPLITUDE = 40000.0
BACKGROUND = 1000.0
NOISE_SPAN = 256

MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX_M1 = 0xBF58476D1CE4E5B9
_SPLITMIX_M2 = 0x94D049BB133111EB

MIN_DIM, MAX_DIM = 1, 4096
MIN_DWELL_US, MAX_DWELL_US = 1, 10000


def splitmix64(value: int) -> int:
    """Finalizer of the SplitMix64 generator over a 64-bit state."""
    z = value & MASK64
    z = ((z ^ (z >> 30)) * _SPLITMIX_M1) & MASK64
    z = ((z ^ (z >> 27)) * _SPLITMIX_M2) & MASK64
    return (z ^ (z >> 31)) & MASK64


def pixel_noise(seed: int, index: int) -> int:
    """i-th noise byte of the SplitMix64 stream seeded with `seed`."""
    state = (seed + (index + 1) * _SPLITMIX_GAMMA) & MASK64
    return splitmix64(state) & (NOISE_SPAN - 1)


@dataclass(frozen=True)
class ProbePosition:
    x: float
    y: float

    def validate(self) -> None:
        for name, value in (("x", self.x), ("y", self.y)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise IceError(E_INVALID_PARAMS, f"{name} must be a number")
            if not 0.0 <= value <= 1.0:
                raise IceError(E_OUT_OF_RANGE, f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y)}


@dataclass(frozen=True)
class ScanParameters:
    width: int
    height: int
    dwell_time_us: int
    seed: int

    def validate(self) -> None:
        for name, value, lo, hi in (
            ("width", self.width, MIN_DIM, MAX_DIM),
            ("height", self.height, MIN_DIM, MAX_DIM),
            ("dwell_time_us", self.dwell_time_us, MIN_DWELL_US, MAX_DWELL_US),
        ):
            if isinstance(value, bool) or not isinstance(value, int):
                raise IceError(E_INVALID_PARAMS, f"{name} must be an integer")
            if not lo <= value <= hi:
                raise IceError(E_INVALID_PARAMS, f"{name}={value} outside [{lo}, {hi}]")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise IceError(E_INVALID_PARAMS, "seed must be an integer")
        if not 0 <= self.seed <= MASK64:
            raise IceError(E_INVALID_PARAMS, "seed must fit in 64 unsigned bits")

    @property
    def total_dwell_us(self) -> int:
        return self.width * self.height * self.dwell_time_us

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "dwell_time_us": self.dwell_time_us,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ScanStatus:
    state: str
    scan_id: str | None
    progress: float
    frames_completed: int

    def to_dict(self) -> dict:
        return {
            "state": self.state,
            "scan_id": self.scan_id,
            "progress": self.progress,
            "frames_completed": self.frames_completed,
        }


@dataclass(frozen=True)
class InstrumentMetadata:
    instrument_name: str = "U200-sim"
    facility: str = "CNMS-sim"
    controller: str = "swift-sim"
    fields: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "instrument_name": self.instrument_name,
            "facility": self.facility,
            "controller": self.controller,
            "fields": dict(self.fields),
        }


def generate_frame(params: ScanParameters, position: ProbePosition) -> np.ndarray:
    """Synthesize one height x width uint16 frame; pure in its arguments."""
    params.validate()
    position.validate()
    w, h = params.width, params.height
    lattice = w / LATTICE_DIVISOR
    sigma = lattice / SIGMA_DIVISOR
    phase_x = position.x * w
    phase_y = position.y * h
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    # fold each coordinate to its signed distance from the nearest peak
    dx = (cols - phase_x + lattice / 2.0) % lattice - lattice / 2.0
    dy = (rows - phase_y + lattice / 2.0) % lattice - lattice / 2.0
    dist = (dx[np.newaxis, :] * dx[np.newaxis, :] + dy[:, np.newaxis] * dy[:, np.newaxis]) / (
        2.0 * sigma * sigma
    )
    frame = np.rint(BACKGROUND + PEAK_AMPLITUDE * np.exp(-dist)).astype(np.uint16)
    if w == 1 and h == 1:
        return frame  # noise disabled on the degenerate single-pixel frame
    frame += _noise_array(params.seed, h * w).reshape(h, w)
    return frame


def _noise_array(seed: int, count: int) -> np.ndarray:
    idx = np.arange(1, count + 1, dtype=np.uint64)
    state = np.uint64(seed & MASK64) + idx * np.uint64(_SPLITMIX_GAMMA)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_SPLITMIX_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_SPLITMIX_M2)
    z = z ^ (z >> np.uint64(31))
    return (z & np.uint64(NOISE_SPAN - 1)).astype(np.uint16)


def frame_to_bytes(frame: np.ndarray) -> bytes:
    """Row-major u16 big-endian pixel bytes, as stored in the ICEM body."""
    return np.ascontiguousarray(frame, dtype=np.uint16).astype(">u2").tobytes()


def encode_measurement(frame: np.ndarray) -> bytes:
    h, w = frame.shape
    header = MEASUREMENT_MAGIC + bytes([MEASUREMENT_VERSION]) + struct.pack(">II", w, h)
    return header + frame_to_bytes(frame)


def decode_measurement(data: bytes) -> np.ndarray:
    if len(data) < 13 or data[:4] != MEASUREMENT_MAGIC:
        raise ValueError("not an ICEM measurement file")
    if data[4] != MEASUREMENT_VERSION:
        raise ValueError(f"unsupported ICEM version {data[4]}")
    w, h = struct.unpack(">II", data[5:13])
    body = data[13:]
    if len(body) != w * h * 2:
        raise ValueError(f"pixel payload is {len(body)} bytes, expected {w * h * 2}")
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.uint16)


def read_measurement(path) -> np.ndarray:
    return decode_measurement(Path(path).read_bytes())


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp-{uuid.uuid4().hex[:8]}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class MicroscopeSimulator:
    """Stand-in for the instrument control computer's command surface.

    All commands are serialized through one internal lock so every caller
    observes a consistent snapshot; the scan worker advances on its own
    thread and publishes state only at commit points. `time_scale` maps
    simulated acquisition time to wall time (0 runs scans inline).
    """

    MUTATING_METHODS = frozenset({"set_probe_position", "start_scan", "abort_scan"})

    def __init__(self, store_dir, time_scale: float = 1.0, metadata: InstrumentMetadata | None = None):
        if time_scale < 0:
            raise ValueError("time_scale must be >= 0")
        self.store_dir = Path(store_dir)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self.time_scale = float(time_scale)
        self._metadata = metadata or InstrumentMetadata()
        self._lock = threading.RLock()
        self._state = STATE_IDLE
        self._scan_id: str | None = None
        self._scan_started = 0.0
        self._scan_duration = 0.0
        self._abort = threading.Event()
        self._worker: threading.Thread | None = None
        self._frames_completed = 0
        self._position = ProbePosition(0.5, 0.5)
        self._scan_counter = 0

    # -- steering commands ------------------------------------------------

    def scan_status(self) -> ScanStatus:
        with self._lock:
            if self._state == STATE_IDLE:
                return ScanStatus(STATE_IDLE, None, 0.0, self._frames_completed)
            elapsed = time.monotonic() - self._scan_started
            progress = 1.0 if self._scan_duration <= 0 else min(elapsed / self._scan_duration, 1.0)
            return ScanStatus(STATE_SCANNING, self._scan_id, progress, self._frames_completed)

    def get_probe_position(self) -> ProbePosition:
        with self._lock:
            return self._position

    def set_probe_position(self, position: ProbePosition) -> None:
        position.validate()
        with self._lock:
            if self._state == STATE_SCANNING:
                raise IceError(E_INSTRUMENT_BUSY, "cannot move probe while scanning")
            self._position = ProbePosition(float(position.x), float(position.y))

    def metadata(self) -> InstrumentMetadata:
        return self._metadata

    def start_scan(self, params: ScanParameters) -> str:
        params.validate()
        with self._lock:
            if self._state == STATE_SCANNING:
                raise IceError(E_INSTRUMENT_BUSY, f"scan {self._scan_id} is active")
            self._scan_counter += 1
            scan_id = f"scan-{self._scan_counter:06d}-{uuid.uuid4().hex[:8]}"
            position = self._position
            duration = params.total_dwell_us * 1e-6 * self.time_scale
            if self.time_scale == 0:
                self._acquire(scan_id, params, position)
                self._frames_completed += 1
                return scan_id
            self._state = STATE_SCANNING
            self._scan_id = scan_id
            self._scan_started = time.monotonic()
            self._scan_duration = duration
            self._abort = threading.Event()
            self._worker = threading.Thread(
                target=self._run_scan,
                args=(scan_id, params, position, self._abort, duration),
                name=f"scan-{scan_id}",
                daemon=True,
            )
            self._worker.start()
            return scan_id

    def abort_scan(self, scan_id: str) -> None:
        with self._lock:
            if self._state != STATE_SCANNING or scan_id != self._scan_id:
                return  # stale or idle abort is a no-op
            self._abort.set()
            worker = self._worker
        if worker is not None:
            worker.join(timeout=30.0)

    # -- acquisition ------------------------------------------------------

    def _run_scan(self, scan_id, params, position, abort, duration) -> None:
        aborted = abort.wait(duration)
        if not aborted:
            try:
                self._acquire(scan_id, params, position, abort)
            except Exception:
                log.exception("scan %s failed during acquisition", scan_id)
                aborted = True
        with self._lock:
            if self._scan_id == scan_id:
                self._state = STATE_IDLE
                self._scan_id = None
                if not aborted and not abort.is_set():
                    self._frames_completed += 1

    def _acquire(self, scan_id, params, position, abort: threading.Event | None = None) -> None:
        frame = generate_frame(params, position)
        pixel_path = self.store_dir / f"{scan_id}{MEASUREMENT_SUFFIX}"
        payload = encode_measurement(frame)
        with self._lock:
            # commit point: an abort that lost the race to here writes nothing
            if abort is not None and abort.is_set():
                return
            _write_atomic(pixel_path, payload)
            sidecar = {
                "scan_id": scan_id,
                "params": params.to_dict(),
                "probe_position": position.to_dict(),
                "instrument": self._metadata.to_dict(),
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "sha256": hashlib.sha256(payload).hexdigest(),
            }
            sidecar_path = self.store_dir / f"{scan_id}{SIDECAR_SUFFIX}"
            _write_atomic(sidecar_path, json.dumps(sidecar, indent=2, sort_keys=True).encode())

    # -- adapter surface ---------------------------------------------------

    def dispatch_table(self) -> dict:
        """Named-method table consumed by the control server."""
        return {
            "scan_status": self._cmd_scan_status,
            "get_probe_position": self._cmd_get_probe_position,
            "set_probe_position": self._cmd_set_probe_position,
            "start_scan": self._cmd_start_scan,
            "abort_scan": self._cmd_abort_scan,
            "metadata": self._cmd_metadata,
        }

    def _cmd_scan_status(self, params: dict):
        _expect_keys(params, ())
        return self.scan_status().to_dict()

    def _cmd_get_probe_position(self, params: dict):
        _expect_keys(params, ())
        return self.get_probe_position().to_dict()

    def _cmd_set_probe_position(self, params: dict):
        _expect_keys(params, ("x", "y"))
        self.set_probe_position(ProbePosition(_number(params, "x"), _number(params, "y")))
        return True

    def _cmd_start_scan(self, params: dict):
        _expect_keys(params, ("width", "height", "dwell_time_us", "seed"), optional=("seed",))
        sp = ScanParameters(
            width=_integer(params, "width"),
            height=_integer(params, "height"),
            dwell_time_us=_integer(params, "dwell_time_us"),
            seed=_integer(params, "seed") if "seed" in params else 0,
        )
        return self.start_scan(sp)

    def _cmd_abort_scan(self, params: dict):
        _expect_keys(params, ("scan_id",))
        scan_id = params["scan_id"]
        if not isinstance(scan_id, str):
            raise IceError(E_INVALID_PARAMS, "scan_id must be a string")
        self.abort_scan(scan_id)
        return True

    def _cmd_metadata(self, params: dict):
        _expect_keys(params, ())
        return self.metadata().to_dict()


def _expect_keys(params: dict, keys, optional=()) -> None:
    required = [k for k in keys if k not in optional]
    missing = [k for k in required if k not in params]
    extra = [k for k in params if k not in keys]
    if missing:
        raise IceError(E_INVALID_PARAMS, f"missing params: {', '.join(missing)}")
    if extra:
        raise IceError(E_INVALID_PARAMS, f"unexpected params: {', '.join(sorted(extra))}")


def _number(params: dict, key: str) -> float:
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise IceError(E_INVALID_PARAMS, f"{key} must be a number")
    return float(value)


def _integer(params: dict, key: str) -> int:
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise IceError(E_INVALID_PARAMS, f"{key} must be an integer")
    return value
