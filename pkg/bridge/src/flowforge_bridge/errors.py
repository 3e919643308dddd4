"""Error types for the bridge server."""

from __future__ import annotations

__all__ = ["BridgeError", "FrameError"]


class BridgeError(Exception):
    """An expected failure whose message is safe to send to clients."""


class FrameError(BridgeError):
    """A wire frame could not be read or decoded."""
