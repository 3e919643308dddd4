"""Object layouts in pixel space and their latent-resolution masks.

A layout lists axis-aligned boxes over the source image.  Rasterization
marks every latent cell whose pixel footprint overlaps at least one box
with positive area, which keeps the foreground mask conservative even
when box edges fall between cell boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ParseError

__all__ = [
    "ObjectBox",
    "Layout",
    "LatentMask",
    "rasterize_mask",
    "complement",
    "layout_from_json",
    "layout_to_json",
    "load_layout",
    "save_layout",
]


@dataclass(frozen=True)
class ObjectBox:
    """One labeled axis-aligned rectangle in pixel coordinates."""

    label: str
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise InvalidArgumentError(f"box coordinate {name} is not finite: {v!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidArgumentError(
                f"box must have positive area, got ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )


@dataclass(frozen=True)
class Layout:
    """Image dimensions plus the object boxes drawn on that image."""

    image_width: int
    image_height: int
    boxes: tuple[ObjectBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise InvalidArgumentError(
                f"image dimensions must be positive, got {self.image_width}x{self.image_height}"
            )
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for box in self.boxes:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > self.image_width or box.y2 > self.image_height:
                raise InvalidArgumentError(
                    f"box {box.label!r} exceeds image bounds "
                    f"{self.image_width}x{self.image_height}: "
                    f"({box.x1}, {box.y1}, {box.x2}, {box.y2})"
                )


@dataclass(frozen=True, eq=False)
class LatentMask:
    """Binary height x width mask at latent resolution."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.bits, dtype=np.uint8))
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise InvalidArgumentError(f"mask must be a 2-D array, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise InvalidArgumentError("mask entries must be 0 or 1")
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def rasterize_mask(layout: Layout, latent_height: int, latent_width: int, dilate: int = 0) -> LatentMask:
    """Mark latent cells whose pixel footprint overlaps any layout box.

    Cell (r, c) covers the half-open pixel rectangle
    ``[c*sx, (c+1)*sx) x [r*sy, (r+1)*sy)`` where sx and sy scale latent
    cells back to pixels.  A cell is set when that rectangle intersects a
    box with positive area.  ``dilate`` grows the result by a Chebyshev
    radius in latent cells.
    """
    if latent_height < 1 or latent_width < 1:
        raise InvalidArgumentError(
            f"latent dimensions must be positive, got {latent_height}x{latent_width}"
        )
    if dilate < 0:
        raise InvalidArgumentError(f"dilation radius must be non-negative, got {dilate}")
    sy = layout.image_height / latent_height
    sx = layout.image_width / latent_width
    rows = np.arange(latent_height, dtype=np.float64)
    cols = np.arange(latent_width, dtype=np.float64)
    top, bottom = rows * sy, (rows + 1.0) * sy
    left, right = cols * sx, (cols + 1.0) * sx
    bits = np.zeros((latent_height, latent_width), dtype=np.uint8)
    for box in layout.boxes:
        hit_rows = (top < box.y2) & (bottom > box.y1)
        hit_cols = (left < box.x2) & (right > box.x1)
        bits |= hit_rows[:, None] & hit_cols[None, :]
    if dilate > 0:
        padded = np.pad(bits, dilate, mode="constant")
        grown = np.zeros_like(bits)
        for dy in range(2 * dilate + 1):
            for dx in range(2 * dilate + 1):
                grown |= padded[dy : dy + latent_height, dx : dx + latent_width]
        bits = grown
    return LatentMask(bits)


def complement(mask: LatentMask) -> LatentMask:
    """Flip every mask bit."""
    return LatentMask(1 - mask.bits)


def layout_from_json(obj: dict) -> Layout:
    """Build a layout from its JSON dictionary form."""
    try:
        boxes = tuple(
            ObjectBox(
                label=str(b["label"]),
                x1=float(b["x1"]),
                y1=float(b["y1"]),
                x2=float(b["x2"]),
                y2=float(b["y2"]),
            )
            for b in obj.get("boxes", [])
        )
        return Layout(
            image_width=int(obj["image_width"]),
            image_height=int(obj["image_height"]),
            boxes=boxes,
        )
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"malformed layout object: {exc!r}") from exc


def layout_to_json(layout: Layout) -> dict:
    """Serialize a layout to its JSON dictionary form."""
    return {
        "image_width": layout.image_width,
        "image_height": layout.image_height,
        "boxes": [
            {"label": b.label, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
            for b in layout.boxes
        ],
    }


def load_layout(path) -> Layout:
    """Read a layout JSON file."""
    try:
        with open(path, "rb") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid layout JSON: {exc}", offset=exc.pos) from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: layout JSON must be an object", offset=0)
    return layout_from_json(obj)


def save_layout(path, layout: Layout) -> None:
    """Write a layout JSON file."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(layout_to_json(layout), fh, indent=2, sort_keys=True)
        fh.write("\n")
