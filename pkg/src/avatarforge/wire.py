"""Framed TCP protocol for remote denoisers.

Frame layout (all integers little-endian):

    magic   4 bytes  b"DHGD"
    version u16      currently 1
    hlen    u32      byte length of the UTF-8 JSON header
    header  hlen bytes
    payload 4 * prod(header["shape"]) bytes of row-major, channel-last,
            little-endian float32 (absent when shape is missing or empty)

Request headers: {"t", "prompt", "scale", "shape", "dtype": "f32le"}.
Response headers: {"status": "ok"|"error", "message", "shape"}.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"DHGD"
VERSION = 1
DEFAULT_PORT = 7341
_PREFIX = struct.Struct("<4sHI")


class WireError(Exception):
    """Malformed frame: bad magic, truncated data, or invalid header."""


class WireVersionError(WireError):
    """Protocol version mismatch; never retried."""


def payload_from_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def array_from_payload(payload: bytes, shape) -> np.ndarray:
    expected = 4 * int(np.prod(shape)) if shape else 0
    if len(payload) != expected:
        raise WireError(f"payload length {len(payload)} != expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    shape = header.get("shape") or []
    expected = 4 * int(np.prod(shape)) if shape else 0
    if len(payload) != expected:
        raise WireError("payload does not match header shape")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def decode_frame(data: bytes):
    """Parse one complete frame from bytes; returns (header, payload)."""
    if len(data) < _PREFIX.size:
        raise WireError("frame shorter than prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireVersionError(f"unsupported protocol version {version}")
    if len(data) < _PREFIX.size + hlen:
        raise WireError("truncated header")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WireError(f"invalid header: {e}") from e
    shape = header.get("shape") or []
    expected = 4 * int(np.prod(shape)) if shape else 0
    payload = data[_PREFIX.size + hlen:]
    if len(payload) != expected:
        raise WireError(f"payload length {len(payload)} != expected {expected}")
    return header, payload


def _read_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 65536))
        if not chunk:
            raise WireError(f"connection closed after {got}/{n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock, max_payload: int | None = None):
    """Read one frame from a socket; returns (header, payload)."""
    prefix = _read_exact(sock, _PREFIX.size)
    magic, version, hlen = _PREFIX.unpack_from(prefix)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireVersionError(f"unsupported protocol version {version}")
    if hlen > 1 << 20:
        raise WireError("header too large")
    try:
        header = json.loads(_read_exact(sock, hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WireError(f"invalid header: {e}") from e
    shape = header.get("shape") or []
    expected = 4 * int(np.prod(shape)) if shape else 0
    if max_payload is not None and expected > max_payload:
        raise WireError("payload too large")
    payload = _read_exact(sock, expected) if expected else b""
    return header, payload


def write_frame(sock, header: dict, payload: bytes = b"") -> None:
    sock.sendall(encode_frame(header, payload))


def request_header(t: int, prompt: str, scale: float, shape) -> dict:
    return {"t": int(t), "prompt": prompt, "scale": float(scale),
            "shape": [int(v) for v in shape], "dtype": "f32le"}


def ok_header(shape) -> dict:
    return {"status": "ok", "message": "", "shape": [int(v) for v in shape]}


def error_header(message: str) -> dict:
    return {"status": "error", "message": message, "shape": []}
