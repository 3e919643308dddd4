"""Framed JSON protocol for talking to velocity servers.

Every message is one frame: a 4-byte big-endian payload length followed
by that many bytes of UTF-8 JSON.  Tensors travel as a shape list plus
base64-encoded little-endian float32 data in row-major order.  Servers
answer every request with a frame whose ``status`` is ``ok`` or
``error`` and which echoes the request ``id`` when one was given.

The operations are ``hello`` (capability discovery), ``encode`` (image
to latent), ``decode`` (latent to image), ``velocity`` (evaluate the
field at a latent, time, prompt) and ``shutdown``.
"""

from __future__ import annotations

import base64
import json
import socket
import struct
import threading

import numpy as np

from .errors import FlowForgeError, InvalidArgumentError, ParseError
from .grid import Grid

__all__ = [
    "MAX_FRAME_BYTES",
    "send_message",
    "recv_message",
    "dumps_canonical",
    "tensor_to_wire",
    "tensor_from_wire",
    "LoopbackServer",
]

MAX_FRAME_BYTES = 1 << 29
_LENGTH = struct.Struct(">I")


def dumps_canonical(obj) -> bytes:
    """Serialize a message with sorted keys and no whitespace.

    Servers in this package always emit this canonical form so that
    protocol transcripts are stable byte-for-byte.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def send_message(sock: socket.socket, obj) -> None:
    """Send one length-prefixed JSON frame."""
    payload = dumps_canonical(obj)
    if len(payload) > MAX_FRAME_BYTES:
        raise InvalidArgumentError(f"frame of {len(payload)} bytes exceeds the protocol limit")
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


def recv_message(sock: socket.socket):
    """Receive one frame; returns None on a clean end of stream."""
    header = _recv_exact(sock, _LENGTH.size)
    if header is None:
        return None
    (length,) = _LENGTH.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise ParseError(f"frame length {length} exceeds the protocol limit", offset=0)
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ParseError("connection closed mid-frame", offset=_LENGTH.size)
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"frame payload is not valid JSON: {exc}", offset=_LENGTH.size) from exc


def tensor_to_wire(g: Grid) -> dict:
    """Encode a grid as the protocol tensor object (f32 little-endian)."""
    raw = np.ascontiguousarray(g.data.astype("<f4")).tobytes()
    return {"shape": [int(s) for s in g.shape], "data": base64.b64encode(raw).decode("ascii")}


def tensor_from_wire(obj) -> Grid:
    """Decode a protocol tensor object back into a grid."""
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise InvalidArgumentError("tensor object must carry 'shape' and 'data'")
    shape = obj["shape"]
    if not (isinstance(shape, list) and len(shape) == 3):
        raise InvalidArgumentError(f"tensor shape must be a 3-item list, got {shape!r}")
    c, h, w = (int(s) for s in shape)
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise InvalidArgumentError(f"tensor data is not valid base64: {exc}") from exc
    count = c * h * w
    if len(raw) != 4 * count:
        raise InvalidArgumentError(
            f"tensor data holds {len(raw)} bytes, expected {4 * count} for shape {shape}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)
    return Grid(data.reshape(c, h, w))


class LoopbackServer:
    """Serve a local backend over real sockets on 127.0.0.1.

    This exists so the remote transport can be exercised end to end
    without an external process: the server accepts one connection at a
    time and answers protocol requests from the wrapped backend.
    """

    def __init__(self, backend, host: str = "127.0.0.1", port: int = 0):
        self._backend = backend
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, name="loopback-server", daemon=True)

    def start(self) -> "LoopbackServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)
        self._listener.close()

    def __enter__(self) -> "LoopbackServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            with conn:
                self._serve_connection(conn)

    def _serve_connection(self, conn: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                msg = recv_message(conn)
            except ParseError as exc:
                send_message(conn, {"status": "error", "message": str(exc)})
                continue
            except OSError:
                return
            if msg is None:
                return
            reply, should_stop = self._dispatch(msg)
            try:
                send_message(conn, reply)
            except OSError:
                return
            if should_stop:
                self._stop.set()
                return

    def _dispatch(self, msg) -> tuple[dict, bool]:
        # Validation failures use fixed message texts; they are part of the
        # protocol surface and conformance transcripts assert them verbatim.
        base: dict = {}
        if isinstance(msg, dict) and "id" in msg:
            base["id"] = msg["id"]
        if not isinstance(msg, dict) or not isinstance(msg.get("op"), str):
            return {**base, "status": "error", "message": "request must carry a string 'op'"}, False
        op = msg["op"]
        if op == "velocity":
            if "latent" not in msg:
                return {**base, "status": "error", "message": "velocity request needs a tensor 'latent'"}, False
            t = msg.get("t")
            if not isinstance(t, (int, float)) or isinstance(t, bool):
                return {**base, "status": "error", "message": "velocity request needs a numeric 't'"}, False
            if not isinstance(msg.get("prompt"), str):
                return {**base, "status": "error", "message": "velocity request needs a string 'prompt'"}, False
        if op == "encode" and "image" not in msg:
            return {**base, "status": "error", "message": "encode request needs a tensor 'image'"}, False
        if op == "decode" and "latent" not in msg:
            return {**base, "status": "error", "message": "decode request needs a tensor 'latent'"}, False
        try:
            if op == "hello":
                return {
                    **base,
                    "status": "ok",
                    "model_id": self._backend.model_id,
                    "latent_channels": int(self._backend.latent_channels),
                    "downsample_factor": int(self._backend.downsample_factor),
                }, False
            if op == "shutdown":
                return {**base, "status": "ok"}, True
            if op == "encode":
                latent = self._backend.encode(tensor_from_wire(msg["image"]))
                return {**base, "status": "ok", "latent": tensor_to_wire(latent)}, False
            if op == "decode":
                image = self._backend.decode(tensor_from_wire(msg["latent"]))
                return {**base, "status": "ok", "image": tensor_to_wire(image)}, False
            if op == "velocity":
                z = tensor_from_wire(msg["latent"])
                v = self._backend.velocity(z, float(msg["t"]), msg["prompt"])
                return {**base, "status": "ok", "velocity": tensor_to_wire(v)}, False
            return {**base, "status": "error", "message": f"unknown op {op!r}"}, False
        except FlowForgeError as exc:
            return {**base, "status": "error", "message": str(exc)}, False
        except Exception as exc:
            return {**base, "status": "error", "message": f"{type(exc).__name__}: {exc}"}, False
