"""Framed JSON wire format.

One message is a 4-byte big-endian payload length followed by that many
bytes of UTF-8 JSON.  Tensor values travel as {"shape": [C, H, W],
"data": base64 of little-endian float32, row-major}.  Replies always
serialize with sorted keys and no whitespace so transcripts are stable
byte for byte.
"""

from __future__ import annotations

import base64
import json
import socket
import struct

import numpy as np

from .errors import BridgeError, FrameError

__all__ = [
    "MAX_FRAME_BYTES",
    "dumps_canonical",
    "send_frame",
    "recv_frame",
    "tensor_to_wire",
    "tensor_from_wire",
]

MAX_FRAME_BYTES = 1 << 29
_LENGTH = struct.Struct(">I")


def dumps_canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def send_frame(sock: socket.socket, obj) -> None:
    payload = dumps_canonical(obj)
    if len(payload) > MAX_FRAME_BYTES:
        raise BridgeError(f"frame of {len(payload)} bytes exceeds the protocol limit")
    sock.sendall(_LENGTH.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket):
    """Read one message; returns None on clean end of stream."""
    header = _recv_exact(sock, _LENGTH.size)
    if header is None:
        return None
    (length,) = _LENGTH.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame length {length} exceeds the protocol limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise FrameError("connection closed mid-frame")
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"frame payload is not valid JSON: {exc}") from exc


def tensor_to_wire(data: np.ndarray) -> dict:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise BridgeError(f"tensor must have rank 3, got shape {arr.shape}")
    raw = np.ascontiguousarray(arr.astype("<f4")).tobytes()
    return {"shape": [int(s) for s in arr.shape], "data": base64.b64encode(raw).decode("ascii")}


def tensor_from_wire(obj) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise BridgeError("tensor object must carry 'shape' and 'data'")
    shape = obj["shape"]
    if not (isinstance(shape, list) and len(shape) == 3):
        raise BridgeError(f"tensor shape must be a 3-item list, got {shape!r}")
    c, h, w = (int(s) for s in shape)
    if c < 1 or h < 1 or w < 1:
        raise BridgeError(f"tensor dimensions must be positive, got {shape}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise BridgeError(f"tensor data is not valid base64: {exc}") from exc
    count = c * h * w
    if len(raw) != 4 * count:
        raise BridgeError(
            f"tensor data holds {len(raw)} bytes, expected {4 * count} for shape {shape}"
        )
    return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64).reshape(c, h, w)
