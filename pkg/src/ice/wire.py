"""Control-channel message envelope and length-prefixed frame codec.

Frame layout (bit-exact):
  bytes 0-3   payload byte count N, unsigned 32-bit big-endian
  bytes 4..   exactly N bytes of canonical JSON (UTF-8, sorted keys,
              no insignificant whitespace), one object per frame

The same codec carries the control channel, the registry protocol and the
data channel. Payloads are capped at 16 MiB; bulk measurement bytes travel
chunked on the data channel, never inline here.

Values allowed in params / result trees: null, bool, 64-bit signed int,
finite IEEE-754 double, UTF-8 string, homogeneous list, string-keyed map.
"""

from __future__ import annotations

import json
import math
import socket
import struct
from dataclasses import dataclass
from typing import Any

MAX_PAYLOAD = 16 * 1024 * 1024
_HEADER = struct.Struct(">I")
HEADER_SIZE = _HEADER.size

KIND_REQUEST = "Request"
KIND_RESPONSE = "Response"
STATUS_OK = "Ok"
STATUS_ERROR = "Error"

MAX_ID_LEN = 64
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

E_NOT_FOUND = "NotFound"
E_INVALID_PARAMS = "InvalidParams"
E_POLICY_DENIED = "PolicyDenied"
E_INSTRUMENT_BUSY = "InstrumentBusy"
E_OUT_OF_RANGE = "OutOfRange"
E_INTERNAL = "Internal"
E_UNAUTHENTICATED = "Unauthenticated"

ERROR_CODES = frozenset(
    {
        E_NOT_FOUND,
        E_INVALID_PARAMS,
        E_POLICY_DENIED,
        E_INSTRUMENT_BUSY,
        E_OUT_OF_RANGE,
        E_INTERNAL,
        E_UNAUTHENTICATED,
    }
)


class ProtocolError(Exception):
    """Base class for frame-level failures."""


class FrameTooLarge(ProtocolError):
    """Serialized payload exceeds MAX_PAYLOAD (encode side)."""


class MalformedFrame(ProtocolError):
    """Bad length field, invalid UTF-8 or JSON, or schema violation."""


class Truncated(ProtocolError):
    """Byte source ended in the middle of a frame."""


@dataclass(frozen=True)
class ErrorInfo:
    code: str
    message: str

    def __post_init__(self) -> None:
        if self.code not in ERROR_CODES:
            raise ValueError(f"unknown error code {self.code!r}")
        if not self.message or not isinstance(self.message, str):
            raise ValueError("error message must be a non-empty string")

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


class IceError(Exception):
    """Command failure that maps onto a wire ErrorInfo.

    Raised by adapters, servers and clients; dispatch layers turn it into
    an Error response (and client proxies turn Error responses back into
    exceptions of this shape).
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message

    @property
    def info(self) -> ErrorInfo:
        return ErrorInfo(self.code, self.message)


@dataclass
class Message:
    """One control-channel envelope: a request or its response."""

    id: str
    kind: str
    object: str | None = None
    method: str | None = None
    params: dict | None = None
    principal: str | None = None
    status: str | None = None
    result: Any = None
    error: ErrorInfo | None = None

    @classmethod
    def request(
        cls,
        request_id: str,
        object_name: str,
        method: str,
        params: dict | None = None,
        principal: str = "anonymous",
    ) -> "Message":
        return cls(
            id=request_id,
            kind=KIND_REQUEST,
            object=object_name,
            method=method,
            params=dict(params or {}),
            principal=principal,
        )

    @classmethod
    def ok(cls, request_id: str, result: Any = None, principal: str | None = None) -> "Message":
        return cls(
            id=request_id,
            kind=KIND_RESPONSE,
            status=STATUS_OK,
            result=result,
            principal=principal,
        )

    @classmethod
    def fail(
        cls, request_id: str, code: str, message: str, principal: str | None = None
    ) -> "Message":
        return cls(
            id=request_id,
            kind=KIND_RESPONSE,
            status=STATUS_ERROR,
            error=ErrorInfo(code, message),
            principal=principal,
        )


def _value_kind(value: Any) -> str:
    # bool checked before int: bool is an int subclass
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "str"
    if isinstance(value, list):
        return "list"
    if isinstance(value, dict):
        return "map"
    raise ValueError(f"unsupported value type {type(value).__name__}")


def validate_value(value: Any, path: str = "value") -> None:
    """Check a params/result tree against the wire value rules."""
    kind = _value_kind(value)
    if kind == "int":
        if not INT64_MIN <= value <= INT64_MAX:
            raise ValueError(f"{path}: integer out of 64-bit signed range")
    elif kind == "float":
        if not math.isfinite(value):
            raise ValueError(f"{path}: non-finite float")
    elif kind == "list":
        kinds = set()
        for i, item in enumerate(value):
            validate_value(item, f"{path}[{i}]")
            kinds.add(_value_kind(item))
        if len(kinds) > 1:
            raise ValueError(f"{path}: heterogeneous list {sorted(kinds)}")
    elif kind == "map":
        for key, item in value.items():
            if not isinstance(key, str):
                raise ValueError(f"{path}: non-string map key {key!r}")
            validate_value(item, f"{path}.{key}")


def validate_message(msg: Message) -> None:
    if not isinstance(msg.id, str) or not 1 <= len(msg.id) <= MAX_ID_LEN:
        raise ValueError("id must be a string of 1..64 chars")
    if msg.kind == KIND_REQUEST:
        if not msg.object or not isinstance(msg.object, str):
            raise ValueError("request needs a non-empty object name")
        if not msg.method or not isinstance(msg.method, str):
            raise ValueError("request needs a non-empty method name")
        if not isinstance(msg.params, dict):
            raise ValueError("request params must be a map")
        validate_value(msg.params, "params")
        if not msg.principal or not isinstance(msg.principal, str):
            raise ValueError("request needs a non-empty principal")
        if msg.status is not None or msg.result is not None or msg.error is not None:
            raise ValueError("request must not carry response fields")
    elif msg.kind == KIND_RESPONSE:
        if msg.object is not None or msg.method is not None or msg.params is not None:
            raise ValueError("response must not carry request fields")
        if msg.status == STATUS_OK:
            if msg.error is not None:
                raise ValueError("Ok response must not carry error")
            validate_value(msg.result, "result")
        elif msg.status == STATUS_ERROR:
            if not isinstance(msg.error, ErrorInfo):
                raise ValueError("Error response needs ErrorInfo")
            if msg.result is not None:
                raise ValueError("Error response must not carry result")
        else:
            raise ValueError(f"unknown status {msg.status!r}")
    else:
        raise ValueError(f"unknown kind {msg.kind!r}")


def message_to_payload(msg: Message) -> dict:
    payload: dict[str, Any] = {"id": msg.id, "kind": msg.kind}
    if msg.principal is not None:
        payload["principal"] = msg.principal
    if msg.kind == KIND_REQUEST:
        payload["object"] = msg.object
        payload["method"] = msg.method
        payload["params"] = msg.params
    else:
        payload["status"] = msg.status
        if msg.status == STATUS_OK:
            payload["result"] = msg.result
        else:
            payload["error"] = msg.error.to_dict()
    return payload


def _reject_constant(token: str) -> None:
    raise ValueError(f"non-finite JSON constant {token}")


def _strict_pairs(pairs: list) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def message_from_payload(obj: Any) -> Message:
    if not isinstance(obj, dict):
        raise MalformedFrame("payload is not a JSON object")
    kind = obj.get("kind")
    if kind not in (KIND_REQUEST, KIND_RESPONSE):
        raise MalformedFrame(f"unknown kind {kind!r}")
    known = {"id", "kind", "object", "method", "params", "principal", "status", "result", "error"}
    extra = set(obj) - known
    if extra:
        raise MalformedFrame(f"unknown fields {sorted(extra)}")
    msg = Message(
        id=obj.get("id"),
        kind=kind,
        object=obj.get("object"),
        method=obj.get("method"),
        params=obj.get("params"),
        principal=obj.get("principal"),
        status=obj.get("status"),
        result=obj.get("result"),
    )
    err = obj.get("error")
    if err is not None:
        if not isinstance(err, dict):
            raise MalformedFrame("error field is not a map")
        try:
            msg.error = ErrorInfo(err.get("code"), err.get("message"))
        except ValueError as exc:
            raise MalformedFrame(str(exc)) from exc
    try:
        validate_message(msg)
    except ValueError as exc:
        raise MalformedFrame(str(exc)) from exc
    return msg


def encode_payload(msg: Message) -> bytes:
    validate_message(msg)
    text = json.dumps(
        message_to_payload(msg),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def encode_frame(msg: Message) -> bytes:
    """Serialize one message as a length-prefixed canonical-JSON frame."""
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload is {len(payload)} bytes, cap is {MAX_PAYLOAD}")
    return _HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"payload is not UTF-8: {exc}") from exc
    try:
        obj = json.loads(text, object_pairs_hook=_strict_pairs, parse_constant=_reject_constant)
    except ValueError as exc:
        raise MalformedFrame(f"payload is not valid JSON: {exc}") from exc
    return message_from_payload(obj)


def decode_frame(stream) -> Message:
    """Read exactly one frame from an incremental byte source.

    The source is anything with a file-like ``read(n)`` (socket makefile,
    BytesIO, ...). Bytes past the frame are left unconsumed. Raises
    Truncated if the source ends mid-frame, MalformedFrame on a bad length
    field or payload.
    """
    header = _read_exact(stream, HEADER_SIZE, allow_empty=False)
    (length,) = _HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"declared payload length {length} exceeds cap")
    payload = _read_exact(stream, length, allow_empty=False)
    return decode_payload(payload)


def _read_exact(stream, n: int, allow_empty: bool) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if allow_empty and not buf:
                return b""
            raise Truncated(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


class FrameDecoder:
    """Incremental decoder tolerant of arbitrary chunk boundaries.

    feed() buffers incoming bytes and returns every message completed by
    that chunk, in order; partial frames stay buffered for the next feed.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out: list[Message] = []
        while True:
            if len(self._buf) < HEADER_SIZE:
                return out
            (length,) = _HEADER.unpack(bytes(self._buf[:HEADER_SIZE]))
            if length > MAX_PAYLOAD:
                raise MalformedFrame(f"declared payload length {length} exceeds cap")
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                return out
            payload = bytes(self._buf[HEADER_SIZE:end])
            del self._buf[:end]
            out.append(decode_payload(payload))

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def read_frame_socket(sock: socket.socket) -> Message | None:
    """Read one frame from a connected socket.

    Returns None on a clean EOF before any header byte; raises Truncated
    if the peer disappears mid-frame.
    """
    header = _recv_exact(sock, HEADER_SIZE, allow_empty=True)
    if not header:
        return None
    (length,) = _HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"declared payload length {length} exceeds cap")
    payload = _recv_exact(sock, length, allow_empty=False)
    return decode_payload(payload)


def write_frame_socket(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_frame(msg))


def _recv_exact(sock: socket.socket, n: int, allow_empty: bool) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(65536, n - len(buf)))
        if not chunk:
            if allow_empty and not buf:
                return b""
            raise Truncated(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)
