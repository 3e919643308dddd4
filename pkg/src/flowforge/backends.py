"""Velocity-field backends and the analytic latent codec.

A backend answers three questions: what velocity does the field assign
to a latent at time t under a prompt, how does an image map into latent
space, and how does a latent map back to an image.  The analytic kinds
(point mass, linear) have closed-form fields and exist for exact
verification; the replay/recording kinds serve regression capture; the
remote kind speaks the framed wire protocol to an external server.
"""

from __future__ import annotations

import itertools
import socket
from collections import deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import (
    InvalidArgumentError,
    RemoteError,
    TraceMissError,
    TransportError,
)
from .grid import Grid
from .trace import TraceRecord, VelocityTrace, latent_digest, quantize_f32
from .wire import recv_message, send_message, tensor_from_wire, tensor_to_wire

__all__ = [
    "PromptPair",
    "AnalyticCodec",
    "PointMassBackend",
    "LinearField",
    "LinearBackend",
    "RecordingBackend",
    "ReplayBackend",
    "RemoteBackend",
]


@dataclass(frozen=True)
class PromptPair:
    """Source and target conditioning strings for one edit."""

    c_src: str
    c_tar: str

    def __post_init__(self):
        if not isinstance(self.c_src, str) or not self.c_src:
            raise InvalidArgumentError("source prompt must be a non-empty string")
        if not isinstance(self.c_tar, str) or not self.c_tar:
            raise InvalidArgumentError("target prompt must be a non-empty string")


class AnalyticCodec:
    """Shape-preserving image/latent mapping for the analytic backends.

    Encoding average-pools each image channel by the downsample factor
    and repeats the pooled channels cyclically up to the latent channel
    count.  Decoding nearest-neighbor upsamples the first three latent
    channels.  Because encoding replicates channels cyclically, encoding
    a decoded latent reproduces that latent exactly.
    """

    def __init__(self, downsample_factor: int = 8, latent_channels: int = 4):
        if downsample_factor < 1:
            raise InvalidArgumentError(
                f"downsample factor must be positive, got {downsample_factor}"
            )
        if latent_channels < 1:
            raise InvalidArgumentError(
                f"latent channel count must be positive, got {latent_channels}"
            )
        self.downsample_factor = int(downsample_factor)
        self.latent_channels = int(latent_channels)

    def encode(self, image: Grid) -> Grid:
        if image.channels != 3:
            raise InvalidArgumentError(f"expected a 3-channel image, got {image.channels}")
        f = self.downsample_factor
        if image.height % f or image.width % f:
            raise InvalidArgumentError(
                f"image dimensions {image.height}x{image.width} are not divisible by {f}"
            )
        h, w = image.height // f, image.width // f
        pooled = image.data.reshape(3, h, f, w, f).mean(axis=(2, 4))
        latent = np.empty((self.latent_channels, h, w), dtype=np.float64)
        for c in range(self.latent_channels):
            latent[c] = pooled[c % 3]
        return Grid(latent)

    def decode(self, latent: Grid) -> Grid:
        if latent.channels != self.latent_channels:
            raise InvalidArgumentError(
                f"expected {self.latent_channels} latent channels, got {latent.channels}"
            )
        f = self.downsample_factor
        image = np.empty((3, latent.height * f, latent.width * f), dtype=np.float64)
        for c in range(3):
            plane = latent.data[c % self.latent_channels]
            image[c] = np.repeat(np.repeat(plane, f, axis=0), f, axis=1)
        return Grid(image)


class _AnalyticBackend:
    """Shared plumbing for the closed-form backends."""

    kind = "analytic"

    def __init__(self, codec: AnalyticCodec | None = None):
        self.codec = codec if codec is not None else AnalyticCodec()

    @property
    def model_id(self) -> str:
        return f"analytic:{self.kind}"

    @property
    def latent_channels(self) -> int:
        return self.codec.latent_channels

    @property
    def downsample_factor(self) -> int:
        return self.codec.downsample_factor

    def encode(self, image: Grid) -> Grid:
        return self.codec.encode(image)

    def decode(self, latent: Grid) -> Grid:
        return self.codec.decode(latent)

    @staticmethod
    def _check_time(t: float) -> float:
        t = float(t)
        if not np.isfinite(t) or t <= 0.0:
            raise InvalidArgumentError(f"velocity time must be positive, got {t}")
        return t


class PointMassBackend(_AnalyticBackend):
    """Exact rectified-flow field whose data distribution is one point.

    For a prompt with anchor mu the unique straight-path field is
    v(z, t) = (z - mu) / t: integrating it backward from any noise
    sample lands exactly on mu at t = 0.
    """

    kind = "point_mass"

    def __init__(self, anchors: Mapping[str, Grid | float], codec: AnalyticCodec | None = None):
        super().__init__(codec)
        if not anchors:
            raise InvalidArgumentError("point-mass backend needs at least one prompt anchor")
        self.anchors = dict(anchors)

    def _anchor(self, prompt: str, like: Grid) -> np.ndarray:
        try:
            mu = self.anchors[prompt]
        except KeyError:
            known = ", ".join(sorted(self.anchors))
            raise InvalidArgumentError(f"unknown prompt {prompt!r}; anchors exist for: {known}") from None
        if isinstance(mu, Grid):
            if not mu.same_shape(like):
                raise InvalidArgumentError(
                    f"anchor shape {mu.shape} does not match latent shape {like.shape}"
                )
            return mu.data
        return np.full(like.shape, float(mu), dtype=np.float64)

    def velocity(self, z: Grid, t: float, prompt: str) -> Grid:
        t = self._check_time(t)
        mu = self._anchor(prompt, z)
        return Grid((z.data - mu) / t)


@dataclass(frozen=True, eq=False)
class LinearField:
    """Affine velocity field v(z) = A z + b for one prompt.

    ``a`` may be a scalar, a per-channel vector, or a full channel
    mixing matrix; ``b`` may be a scalar or a grid.
    """

    a: float | np.ndarray = 0.0
    b: float | Grid = 0.0

    def apply(self, z: Grid) -> np.ndarray:
        a = self.a
        if np.isscalar(a):
            out = float(a) * z.data
        else:
            a = np.asarray(a, dtype=np.float64)
            if a.ndim == 1:
                if a.shape[0] != z.channels:
                    raise InvalidArgumentError(
                        f"per-channel coefficient length {a.shape[0]} does not match {z.channels} channels"
                    )
                out = a[:, None, None] * z.data
            elif a.ndim == 2:
                if a.shape != (z.channels, z.channels):
                    raise InvalidArgumentError(
                        f"channel matrix shape {a.shape} does not match {z.channels} channels"
                    )
                out = np.zeros_like(z.data)
                for row in range(z.channels):
                    for col in range(z.channels):
                        coeff = a[row, col]
                        if coeff != 0.0:
                            out[row] += coeff * z.data[col]
            else:
                raise InvalidArgumentError(f"coefficient array must be 1-D or 2-D, got {a.ndim}-D")
        b = self.b
        if isinstance(b, Grid):
            if not b.same_shape(z):
                raise InvalidArgumentError(
                    f"offset shape {b.shape} does not match latent shape {z.shape}"
                )
            out = out + b.data
        elif b:
            out = out + float(b)
        return out


class LinearBackend(_AnalyticBackend):
    """Time-independent affine velocity field per prompt."""

    kind = "linear"

    def __init__(self, fields: Mapping[str, LinearField], codec: AnalyticCodec | None = None):
        super().__init__(codec)
        if not fields:
            raise InvalidArgumentError("linear backend needs at least one prompt field")
        self.fields = dict(fields)

    def velocity(self, z: Grid, t: float, prompt: str) -> Grid:
        self._check_time(t)
        try:
            fld = self.fields[prompt]
        except KeyError:
            known = ", ".join(sorted(self.fields))
            raise InvalidArgumentError(f"unknown prompt {prompt!r}; fields exist for: {known}") from None
        return Grid(fld.apply(z))


class RecordingBackend:
    """Wrap another backend and capture every velocity it returns.

    Captured velocities are rounded to f32, and the rounded value is
    also what callers receive, so a recorded run and its later replay
    perform bit-identical arithmetic.
    """

    def __init__(self, inner, trace: VelocityTrace | None = None):
        self.inner = inner
        self.trace = trace if trace is not None else VelocityTrace()
        self._step = 0
        self._branch = "src"

    @property
    def kind(self) -> str:
        return self.inner.kind

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    @property
    def latent_channels(self) -> int:
        return self.inner.latent_channels

    @property
    def downsample_factor(self) -> int:
        return self.inner.downsample_factor

    def set_context(self, step: int, branch: str, draw: int = 0) -> None:
        self._step = int(step)
        self._branch = branch

    def velocity(self, z: Grid, t: float, prompt: str) -> Grid:
        if hasattr(self.inner, "set_context"):
            self.inner.set_context(self._step, self._branch)
        v = quantize_f32(self.inner.velocity(z, t, prompt))
        self.trace.append(
            TraceRecord(
                step=self._step,
                branch=self._branch,
                t=float(t),
                velocity=v,
                latent_hash=latent_digest(z),
            )
        )
        return v

    def encode(self, image: Grid) -> Grid:
        return self.inner.encode(image)

    def decode(self, latent: Grid) -> Grid:
        return self.inner.decode(latent)


class ReplayBackend:
    """Serve recorded velocities back in recorded order.

    Records are keyed by (step, branch) and consumed first-in first-out
    within each key, so repeated draws at one step replay in sequence.
    A request whose key or time has no matching record raises
    :class:`TraceMissError`.  In strict mode the query latent must also
    hash to the recorded latent digest.
    """

    kind = "replay"

    def __init__(self, trace: VelocityTrace, codec: AnalyticCodec | None = None, strict: bool = False):
        self.codec = codec if codec is not None else AnalyticCodec()
        self.strict = bool(strict)
        self._queues: dict[tuple[int, str], deque[TraceRecord]] = {}
        for rec in trace:
            self._queues.setdefault((rec.step, rec.branch), deque()).append(rec)
        self._context: tuple[int, str] | None = None

    @property
    def model_id(self) -> str:
        return "replay"

    @property
    def latent_channels(self) -> int:
        return self.codec.latent_channels

    @property
    def downsample_factor(self) -> int:
        return self.codec.downsample_factor

    def set_context(self, step: int, branch: str, draw: int = 0) -> None:
        self._context = (int(step), branch)

    def velocity(self, z: Grid, t: float, prompt: str) -> Grid:
        if self._context is None:
            raise TraceMissError("replay requires a (step, branch) context before each request")
        key = self._context
        queue = self._queues.get(key)
        if not queue:
            raise TraceMissError(f"no recorded velocity left for step {key[0]} branch {key[1]!r}")
        rec = queue[0]
        if rec.t != float(t):
            raise TraceMissError(
                f"time mismatch at step {key[0]} branch {key[1]!r}: recorded {rec.t}, requested {t}"
            )
        if self.strict:
            if rec.latent_hash is None:
                raise TraceMissError(
                    "strict replay needs latent digests, but this trace carries none"
                )
            if latent_digest(z) != rec.latent_hash:
                raise TraceMissError(
                    f"latent digest mismatch at step {key[0]} branch {key[1]!r}"
                )
        queue.popleft()
        if not rec.velocity.same_shape(z):
            raise TraceMissError(
                f"recorded velocity shape {rec.velocity.shape} does not match latent {z.shape}"
            )
        return rec.velocity

    def encode(self, image: Grid) -> Grid:
        return self.codec.encode(image)

    def decode(self, latent: Grid) -> Grid:
        return self.codec.decode(latent)


class RemoteBackend:
    """Velocity backend speaking the framed wire protocol over TCP.

    Failed requests are retried on a fresh connection up to ``retries``
    extra times; persistent socket failures raise
    :class:`TransportError` carrying the attempt count.  Server-reported
    failures raise :class:`RemoteError` untouched.
    """

    kind = "remote"

    def __init__(self, host: str, port: int, retries: int = 2, timeout: float = 30.0):
        if retries < 0:
            raise InvalidArgumentError(f"retry count must be non-negative, got {retries}")
        self.host = host
        self.port = int(port)
        self.retries = int(retries)
        self.timeout = float(timeout)
        self._sock: socket.socket | None = None
        self._ids = itertools.count(1)
        caps = self._request({"op": "hello"})
        self.model_id = str(caps.get("model_id", ""))
        self.latent_channels = int(caps.get("latent_channels", 0))
        self.downsample_factor = int(caps.get("downsample_factor", 0))

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def shutdown_server(self) -> None:
        """Ask the server to stop after answering."""
        self._request({"op": "shutdown"})
        self.close()

    def __enter__(self) -> "RemoteBackend":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        return self._sock

    def _request(self, payload: dict) -> dict:
        payload = {**payload, "id": next(self._ids)}
        attempts = 0
        last_exc: Exception | None = None
        while attempts <= self.retries:
            attempts += 1
            try:
                sock = self._connect()
                send_message(sock, payload)
                reply = recv_message(sock)
            except (OSError, ValueError) as exc:
                last_exc = exc
                self.close()
                continue
            if reply is None:
                last_exc = ConnectionError("server closed the connection")
                self.close()
                continue
            if reply.get("status") != "ok":
                raise RemoteError(
                    f"server rejected {payload['op']!r}: {reply.get('message', 'no message')}"
                )
            return reply
        raise TransportError(
            f"request {payload['op']!r} to {self.host}:{self.port} failed after "
            f"{attempts} attempts: {last_exc}",
            attempts=attempts,
        ) from last_exc

    def velocity(self, z: Grid, t: float, prompt: str) -> Grid:
        reply = self._request(
            {"op": "velocity", "latent": tensor_to_wire(z), "t": float(t), "prompt": prompt}
        )
        return tensor_from_wire(reply["velocity"])

    def encode(self, image: Grid) -> Grid:
        reply = self._request({"op": "encode", "image": tensor_to_wire(image)})
        return tensor_from_wire(reply["latent"])

    def decode(self, latent: Grid) -> Grid:
        reply = self._request({"op": "decode", "latent": tensor_to_wire(latent)})
        return tensor_from_wire(reply["image"])
