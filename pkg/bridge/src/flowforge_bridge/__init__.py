"""Sidecar server exposing velocity models over a framed JSON protocol.

The bridge wraps a text-conditioned velocity model plus an image codec
behind a small socket protocol so an editing engine in another process
can encode images, evaluate velocities and decode latents without
linking against the model runtime.
"""

from .codec import BLOCK, DctCodec, dct_matrix, zigzag_order
from .errors import BridgeError, FrameError
from .framing import (
    MAX_FRAME_BYTES,
    dumps_canonical,
    recv_frame,
    send_frame,
    tensor_from_wire,
    tensor_to_wire,
)
from .models import AnchorFlowModel, BUILTIN_MODELS, load_model
from .server import BridgeServer

__all__ = [
    "AnchorFlowModel",
    "BLOCK",
    "BUILTIN_MODELS",
    "BridgeError",
    "BridgeServer",
    "DctCodec",
    "FrameError",
    "MAX_FRAME_BYTES",
    "dct_matrix",
    "dumps_canonical",
    "load_model",
    "recv_frame",
    "send_frame",
    "tensor_from_wire",
    "tensor_to_wire",
    "zigzag_order",
]

__version__ = "0.1.0"
