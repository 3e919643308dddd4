"""Loading and saving images as [0, 1] float grids.

Two formats are supported and detected by magic bytes: binary PPM (P6,
maxval 255) parsed here with byte-accurate error offsets, and 8-bit RGB
PNG via Pillow.  Pixels map to float64 as v / 255 on load and are
rounded back with clipping on save.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvalidArgumentError, ParseError
from .grid import Grid

__all__ = ["load_image", "save_image"]

_WHITESPACE = b" \t\n\r\x0b\x0c"


class _PpmScanner:
    """Tokenizer over PPM header bytes that tracks the current offset."""

    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: int | None = None):
        at = self.pos if offset is None else offset
        raise ParseError(f"{self.path}: {message} at byte {at}", offset=at)

    def skip_separators(self) -> None:
        # Comments run from '#' to end of line and count as whitespace.
        while self.pos < len(self.blob):
            byte = self.blob[self.pos : self.pos + 1]
            if byte in (b"#",):
                while self.pos < len(self.blob) and self.blob[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            elif byte and byte in _WHITESPACE:
                self.pos += 1
            else:
                return

    def token(self) -> tuple[bytes, int]:
        self.skip_separators()
        start = self.pos
        while self.pos < len(self.blob) and self.blob[self.pos : self.pos + 1] not in _WHITESPACE:
            if self.blob[self.pos : self.pos + 1] == b"#":
                break
            self.pos += 1
        if self.pos == start:
            self.fail("unexpected end of header")
        return self.blob[start : self.pos], start

    def integer(self, what: str) -> tuple[int, int]:
        tok, start = self.token()
        if not tok.isdigit():
            self.fail(f"{what} must be a decimal integer, got {tok!r}", start)
        return int(tok), start


def _load_ppm(blob: bytes, path) -> Grid:
    scanner = _PpmScanner(blob, path)
    magic, start = scanner.token()
    if magic != b"P6":
        scanner.fail(f"unsupported magic {magic!r}, expected b'P6'", start)
    width, _ = scanner.integer("width")
    height, _ = scanner.integer("height")
    maxval, maxval_at = scanner.integer("maxval")
    if width < 1 or height < 1:
        scanner.fail(f"image dimensions must be positive, got {width}x{height}", start)
    if maxval != 255:
        scanner.fail(f"unsupported maxval {maxval}, expected 255", maxval_at)
    if scanner.pos >= len(blob):
        scanner.fail("missing pixel data")
    sep = blob[scanner.pos : scanner.pos + 1]
    if sep not in _WHITESPACE:
        scanner.fail(f"expected single whitespace before pixel data, got {sep!r}")
    scanner.pos += 1
    expected = 3 * width * height
    pixels = blob[scanner.pos : scanner.pos + expected]
    if len(pixels) != expected:
        raise ParseError(
            f"{path}: truncated pixel data at byte {len(blob)}: "
            f"expected {expected} bytes, found {len(pixels)}",
            offset=len(blob),
        )
    data = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    return Grid(np.ascontiguousarray(data.reshape(height, width, 3).transpose(2, 0, 1)))


def _load_png(path) -> Grid:
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise ParseError(f"{path}: unsupported PNG mode {img.mode!r}, expected 8-bit RGB")
            data = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ParseError(f"{path}: not a decodable PNG: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: truncated or corrupt PNG: {exc}") from exc
    return Grid(np.ascontiguousarray(data.astype(np.float64).transpose(2, 0, 1) / 255.0))


def load_image(path) -> Grid:
    """Read a PPM or PNG file into a 3-channel [0, 1] grid."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"P6"):
        with open(path, "rb") as fh:
            return _load_ppm(fh.read(), path)
    if head.startswith(b"\x89PNG\r\n\x1a\n"):
        return _load_png(path)
    raise ParseError(f"{path}: unsupported image format (magic {head[:2]!r})", offset=0)


def _quantize(image: Grid) -> np.ndarray:
    bytes_hwc = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(bytes_hwc.transpose(1, 2, 0))


def save_image(path, image: Grid) -> None:
    """Write a 3-channel grid as PPM or PNG, chosen by file extension."""
    if image.channels != 3:
        raise InvalidArgumentError(f"expected a 3-channel image grid, got {image.channels}")
    suffix = os.path.splitext(str(path))[1].lower()
    pixels = _quantize(image)
    if suffix == ".ppm":
        header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pixels.tobytes())
    elif suffix == ".png":
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    else:
        raise InvalidArgumentError(f"unsupported output extension {suffix!r} (use .ppm or .png)")
