"""Blockwise frequency-transform image codec.

The bridge serves ``encode`` and ``decode`` from a pair of orthonormal
linear maps: RGB pixels are rotated into a brightness axis plus two
opponent-color axes, each rotated channel is transformed by an 8x8
blockwise type-II cosine transform, and the lowest-frequency
coefficients of every block (in the classic diagonal zigzag order)
become the latent channels.  A latent therefore has shape
``(n_luma + 2 * n_chroma, H / 8, W / 8)``.

Because both stages are orthonormal, keeping all 64 coefficients makes
the codec an exact inverse pair, and any truncated configuration is
still linear in the image, which the editing engine relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import BridgeError

__all__ = ["BLOCK", "DctCodec", "dct_matrix", "zigzag_order"]

BLOCK = 8


def dct_matrix(size: int = BLOCK) -> np.ndarray:
    """Return the orthonormal type-II cosine transform matrix.

    Row ``k`` holds ``cos((2x + 1) k pi / (2 size))`` over sample
    positions ``x``, scaled so the matrix is orthonormal: the first row
    by ``sqrt(1 / size)`` and the rest by ``sqrt(2 / size)``.
    """
    k = np.arange(size)[:, None]
    x = np.arange(size)[None, :]
    mat = np.cos((2 * x + 1) * k * np.pi / (2 * size))
    mat[0] *= np.sqrt(1.0 / size)
    mat[1:] *= np.sqrt(2.0 / size)
    return mat


def zigzag_order(size: int = BLOCK) -> tuple[tuple[int, int], ...]:
    """Return block cell coordinates from lowest to highest frequency.

    Cells are visited along anti-diagonals of constant ``row + col``,
    alternating direction on each diagonal, exactly the scan order used
    by classic image codecs.
    """
    order: list[tuple[int, int]] = []
    for s in range(2 * size - 1):
        if s % 2 == 0:
            rows = range(min(s, size - 1), max(0, s - size + 1) - 1, -1)
        else:
            rows = range(max(0, s - size + 1), min(s, size - 1) + 1)
        order.extend((i, s - i) for i in rows)
    return tuple(order)


_DCT = dct_matrix()
_ZIGZAG = zigzag_order()

# Orthonormal rotation taking RGB to one brightness axis and two
# opponent-color axes.  Rows are unit length and mutually orthogonal,
# so the inverse rotation is simply the transpose.
_COLOR = np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, 0.0, -1.0],
        [1.0, -2.0, 1.0],
    ]
) / np.sqrt([[3.0], [2.0], [6.0]])


class DctCodec:
    """Encode RGB images to truncated block-transform latents and back.

    ``n_luma`` coefficients are kept per block for the brightness
    channel and ``n_chroma`` for each opponent-color channel, mirroring
    how photographic codecs spend most of their budget on brightness
    detail.
    """

    def __init__(self, n_luma: int = 10, n_chroma: int = 3):
        for name, value in (("n_luma", n_luma), ("n_chroma", n_chroma)):
            if not isinstance(value, int) or isinstance(value, bool):
                raise BridgeError(f"{name} must be an integer, got {value!r}")
            if not 1 <= value <= BLOCK * BLOCK:
                raise BridgeError(
                    f"{name} must be between 1 and {BLOCK * BLOCK}, got {value}"
                )
        self.n_luma = n_luma
        self.n_chroma = n_chroma

    @property
    def latent_channels(self) -> int:
        return self.n_luma + 2 * self.n_chroma

    @property
    def downsample_factor(self) -> int:
        return BLOCK

    def _keep(self) -> tuple[int, int, int]:
        return (self.n_luma, self.n_chroma, self.n_chroma)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Map an RGB image ``(3, H, W)`` to its latent grid."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise BridgeError(f"encode expects a (3, H, W) image, got shape {img.shape}")
        _, h, w = img.shape
        if h % BLOCK or w % BLOCK:
            raise BridgeError(
                f"image sides must be divisible by {BLOCK}, got {h}x{w}"
            )
        rotated = np.einsum("cd,dhw->chw", _COLOR, img)
        planes = []
        for channel, n_keep in zip(rotated, self._keep()):
            blocks = channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
            blocks = blocks.transpose(0, 2, 1, 3)
            coef = np.einsum("ki,yxij,lj->yxkl", _DCT, blocks, _DCT)
            for idx in range(n_keep):
                i, j = _ZIGZAG[idx]
                planes.append(coef[:, :, i, j])
        return np.stack(planes)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Map a latent grid back to an RGB image ``(3, H, W)``.

        Dropped coefficients are treated as zero, so decode is the
        transpose of encode restricted to the kept subspace.
        """
        lat = np.asarray(latent, dtype=np.float64)
        if lat.ndim != 3 or lat.shape[0] != self.latent_channels:
            raise BridgeError(
                f"decode expects a ({self.latent_channels}, h, w) latent, "
                f"got shape {lat.shape}"
            )
        _, bh, bw = lat.shape
        channels = []
        offset = 0
        for n_keep in self._keep():
            coef = np.zeros((bh, bw, BLOCK, BLOCK))
            for idx in range(n_keep):
                i, j = _ZIGZAG[idx]
                coef[:, :, i, j] = lat[offset + idx]
            offset += n_keep
            blocks = np.einsum("ki,yxkl,lj->yxij", _DCT, coef, _DCT)
            channels.append(blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK))
        return np.einsum("dc,dhw->chw", _COLOR, np.stack(channels))
