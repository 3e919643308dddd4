"""Dense scalar fields and the frequency-split operators built on them.

A :class:`Grid` is an immutable channels x height x width array of 64-bit
floats.  Latents, velocities and gradients are all grids.  The module also
provides the normalized Gaussian kernel, the separable edge-padded blur,
its exact transpose, and the low/high frequency decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "Grid",
    "GaussianKernel",
    "FrequencySplit",
    "make_gaussian_kernel",
    "blur",
    "blur_adjoint",
    "decompose",
    "grid_combine",
]


@dataclass(frozen=True, eq=False)
class Grid:
    """A channels x height x width field of finite float64 scalars.

    The backing array is C-contiguous float64 and read-only, so a grid
    can be shared between threads without defensive copies.  Writable
    input arrays are copied; an already read-only float64 array is
    shared as-is.
    """

    data: np.ndarray

    def __post_init__(self):
        source = self.data
        if (
            isinstance(source, np.ndarray)
            and source.dtype == np.float64
            and source.flags["C_CONTIGUOUS"]
            and not source.flags.writeable
        ):
            arr = source
        else:
            arr = np.array(source, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise InvalidArgumentError(
                f"grid data must have shape (channels, height, width), got {arr.shape}"
            )
        if min(arr.shape) < 1:
            raise InvalidArgumentError(f"grid dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidArgumentError("grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Grid":
        return cls(np.zeros((channels, height, width), dtype=np.float64))

    @classmethod
    def full(cls, channels: int, height: int, width: int, value: float) -> "Grid":
        return cls(np.full((channels, height, width), value, dtype=np.float64))

    def same_shape(self, other: "Grid") -> bool:
        return self.shape == other.shape


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """Normalized k x k Gaussian weights plus their separable 1-D factor."""

    k: int
    sigma: float
    weights: np.ndarray
    weights1d: np.ndarray

    @property
    def radius(self) -> int:
        return (self.k - 1) // 2


@dataclass(frozen=True, eq=False)
class FrequencySplit:
    """Low-pass and residual high-pass components of one grid."""

    low: Grid
    high: Grid

    def __post_init__(self):
        if not self.low.same_shape(self.high):
            raise InvalidArgumentError(
                f"frequency components disagree in shape: {self.low.shape} vs {self.high.shape}"
            )


def make_gaussian_kernel(k: int, sigma: float) -> GaussianKernel:
    """Build the normalized Gaussian kernel of odd size ``k`` and width ``sigma``.

    The 2-D weights are the outer product of a normalized 1-D profile, so
    they sum to one and factor exactly for separable filtering.
    """
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise InvalidArgumentError(f"kernel size must be an integer, got {k!r}")
    if k < 1 or k % 2 == 0:
        raise InvalidArgumentError(f"kernel size must be odd and positive, got {k}")
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise InvalidArgumentError(f"kernel sigma must be finite and positive, got {sigma}")
    offsets = np.arange(k, dtype=np.float64) - (k - 1) // 2
    w1 = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    w1 /= w1.sum()
    w2 = np.outer(w1, w1)
    w1.setflags(write=False)
    w2.setflags(write=False)
    return GaussianKernel(k=int(k), sigma=sigma, weights=w2, weights1d=w1)


def _correlate1d_replicate(arr: np.ndarray, w1: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one axis with ``w1`` using replicated edge values."""
    k = w1.shape[0]
    r = (k - 1) // 2
    if r == 0:
        return arr * w1[0]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    index = [slice(None)] * arr.ndim
    for j in range(k):
        index[axis] = slice(j, j + n)
        out += w1[j] * padded[tuple(index)]
    return out


def _correlate1d_adjoint(arr: np.ndarray, w1: np.ndarray, axis: int) -> np.ndarray:
    """Apply the exact transpose of :func:`_correlate1d_replicate`.

    The forward pass is scatter-with-edge-padding; its transpose gathers
    with zero padding and then folds the pad regions back onto the first
    and last samples, which is where replication sourced them from.
    """
    k = w1.shape[0]
    r = (k - 1) // 2
    if r == 0:
        return arr * w1[0]
    n = arr.shape[axis]
    full_shape = list(arr.shape)
    full_shape[axis] = n + 2 * r
    full = np.zeros(full_shape, dtype=arr.dtype)
    index = [slice(None)] * arr.ndim
    for j in range(k):
        index[axis] = slice(j, j + n)
        full[tuple(index)] += w1[j] * arr
    out_index = [slice(None)] * arr.ndim
    out_index[axis] = slice(r, r + n)
    out = full[tuple(out_index)].copy()

    first = [slice(None)] * arr.ndim
    first[axis] = 0
    head = [slice(None)] * arr.ndim
    head[axis] = slice(0, r)
    out[tuple(first)] += full[tuple(head)].sum(axis=axis)

    last = [slice(None)] * arr.ndim
    last[axis] = n - 1
    tail = [slice(None)] * arr.ndim
    tail[axis] = slice(r + n, None)
    out[tuple(last)] += full[tuple(tail)].sum(axis=axis)
    return out


def blur(g: Grid, kernel: GaussianKernel) -> Grid:
    """Low-pass filter each channel with the separable Gaussian kernel."""
    low = _correlate1d_replicate(g.data, kernel.weights1d, axis=2)
    low = _correlate1d_replicate(low, kernel.weights1d, axis=1)
    return Grid(low)


def blur_adjoint(g: Grid, kernel: GaussianKernel) -> Grid:
    """Apply the transpose of the blur operator, edge effects included."""
    out = _correlate1d_adjoint(g.data, kernel.weights1d, axis=1)
    out = _correlate1d_adjoint(out, kernel.weights1d, axis=2)
    return Grid(out)


def decompose(g: Grid, kernel: GaussianKernel) -> FrequencySplit:
    """Split a grid into its blurred component and the residual detail."""
    low = blur(g, kernel)
    high = Grid(g.data - low.data)
    return FrequencySplit(low=low, high=high)


def grid_combine(a: Grid, b: Grid, alpha: float, beta: float) -> Grid:
    """Return ``alpha * a + beta * b`` for two shape-compatible grids."""
    if not a.same_shape(b):
        raise InvalidArgumentError(f"grid shapes differ: {a.shape} vs {b.shape}")
    return Grid(float(alpha) * a.data + float(beta) * b.data)
