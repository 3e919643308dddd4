"""Velocity models served by the bridge.

A model maps ``(latent, t, prompt)`` to a velocity grid of the same
shape.  On the wire ``t`` always lives in ``[0, 1]``; each model
converts that to its own native time convention internally.  The
built-in model already works on ``[0, 1]`` directly, so its mapping is
the identity; a plugin wrapping a scheduler-indexed model would round
``t * (num_steps - 1)`` or similar and should document its choice.

Real pre-trained models are loaded through the ``module:factory``
plugin syntax: the named module is imported and the factory is called
as ``factory(latent_channels=..., device=...)``.  The returned object
needs a ``model_id`` string, a ``latent_channels`` int and a
``velocity(latent, t, prompt)`` method.
"""

from __future__ import annotations

import hashlib
import importlib

import numpy as np

from .errors import BridgeError

__all__ = ["AnchorFlowModel", "BUILTIN_MODELS", "load_model"]


class AnchorFlowModel:
    """Deterministic straight-line flow toward a prompt-derived anchor.

    The anchor is a per-channel constant built from the SHA-256 digest
    of the prompt, mapped byte-wise into ``[-1, 1]``.  The velocity is
    the rectified-flow field of a point mass at that anchor:

        v(z, t, prompt) = (z - anchor(prompt)) / t

    Everything is pure 64-bit arithmetic with no sampling, so repeated
    calls are bit-identical; the server's determinism contract holds
    trivially.  Only CPU execution exists for this model.
    """

    def __init__(self, latent_channels: int = 16, device: str = "cpu"):
        if not isinstance(latent_channels, int) or latent_channels < 1:
            raise BridgeError(
                f"latent_channels must be a positive integer, got {latent_channels!r}"
            )
        if device != "cpu":
            raise BridgeError(
                f"anchor-flow only runs on device 'cpu', got {device!r}"
            )
        self.latent_channels = latent_channels
        self.device = device
        self.model_id = "anchor-flow"

    def anchor(self, prompt: str) -> np.ndarray:
        """Return the prompt's anchor as a broadcastable ``(C, 1, 1)`` grid."""
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        values = [
            digest[c % len(digest)] / 255.0 * 2.0 - 1.0
            for c in range(self.latent_channels)
        ]
        return np.array(values).reshape(self.latent_channels, 1, 1)

    def velocity(self, latent: np.ndarray, t: float, prompt: str) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise BridgeError(
                f"expected a latent with {self.latent_channels} channels, "
                f"got shape {z.shape}"
            )
        if not 0.0 < t <= 1.0:
            raise BridgeError(f"anchor-flow needs t in (0, 1], got {t}")
        return (z - self.anchor(prompt)) / t


BUILTIN_MODELS = {"anchor-flow": AnchorFlowModel}


def load_model(model_id: str, latent_channels: int, device: str):
    """Instantiate a built-in model or a ``module:factory`` plugin."""
    builtin = BUILTIN_MODELS.get(model_id)
    if builtin is not None:
        return builtin(latent_channels=latent_channels, device=device)
    if ":" in model_id:
        module_name, _, factory_name = model_id.partition(":")
        try:
            module = importlib.import_module(module_name)
        except ImportError as exc:
            raise BridgeError(f"cannot import plugin module {module_name!r}: {exc}") from exc
        factory = getattr(module, factory_name, None)
        if factory is None:
            raise BridgeError(
                f"plugin module {module_name!r} has no attribute {factory_name!r}"
            )
        return factory(latent_channels=latent_channels, device=device)
    known = ", ".join(sorted(BUILTIN_MODELS))
    raise BridgeError(
        f"unknown model {model_id!r}; built-ins are {known}, "
        "or use 'module:factory' to load a plugin"
    )
