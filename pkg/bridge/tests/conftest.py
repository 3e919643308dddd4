"""Shared fixtures and low-level socket helpers for the bridge tests.

The raw helpers here speak the wire format with ``struct`` and plain
sockets on purpose: protocol tests should not round-trip through the
same code they are checking.
"""

from __future__ import annotations

import hashlib
import socket
import struct

import numpy as np
import pytest

from flowforge_bridge import AnchorFlowModel, BridgeServer, DctCodec


def reference_anchor(prompt: str, channels: int) -> np.ndarray:
    """Recompute the built-in model's prompt anchor from first principles."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    values = [digest[c % len(digest)] / 255.0 * 2.0 - 1.0 for c in range(channels)]
    return np.array(values).reshape(channels, 1, 1)


def make_photo(height: int = 240, width: int = 320, seed: int = 7) -> np.ndarray:
    """Build a deterministic photo-like RGB test image in [0, 1].

    Smooth color gradients with two hard-edged rectangles and a little
    sensor-style noise, so the codec sees both low-frequency content
    and sharp transitions.
    """
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    r = 0.55 + 0.25 * np.sin(5 * np.pi * xx) * np.cos(3 * np.pi * yy)
    g = 0.45 + 0.30 * (xx * (1.0 - yy))
    b = 0.50 + 0.20 * np.cos(8 * np.pi * (xx + yy))
    photo = np.stack([r, g, b])
    photo[:, 60:140, 80:180] *= 0.35
    photo[:, 150:220, 200:300] = photo[:, 150:220, 200:300] * 0.5 + 0.45
    photo += np.random.default_rng(seed).normal(0.0, 0.015, photo.shape)
    return np.clip(photo, 0.0, 1.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def photo() -> np.ndarray:
    return make_photo()


@pytest.fixture
def server():
    codec = DctCodec()
    model = AnchorFlowModel(latent_channels=codec.latent_channels)
    with BridgeServer(model, codec) as srv:
        yield srv


@pytest.fixture
def conn(server):
    sock = socket.create_connection(server.address)
    sock.settimeout(10.0)
    yield sock
    sock.close()


def send_raw(sock: socket.socket, payload: bytes) -> None:
    """Send one frame built by hand from a raw JSON payload."""
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _read_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise AssertionError("server closed the connection mid-reply")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_reply(sock: socket.socket) -> bytes:
    """Read one reply frame and return its raw payload bytes."""
    header = _read_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    return _read_exact(sock, length)
