"""Box types, coordinate conversions and intersection-over-union.

Boxes are half-open real intervals: ``area = (x2 - x1) * (y2 - y1)`` with no
"+1" pixel convention, which keeps IoU invariant under scaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import MalformedBox, OutOfFrame

FRAME_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        for name in ("width", "height"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise MalformedBox(f"image {name} must be a positive integer, got {v!r}")

    @classmethod
    def parse(cls, text: str) -> "ImageSize":
        """Parse ``"640x480"``."""
        try:
            w, h = text.lower().split("x")
            return cls(int(w), int(h))
        except ValueError:
            raise MalformedBox(f"bad image size {text!r}, expected WIDTHxHEIGHT") from None

    def __str__(self):
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class AbsBox:
    """Axis-aligned box in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise MalformedBox(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise MalformedBox(f"box corners out of order {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, factor: float) -> "AbsBox":
        return AbsBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def translated(self, dx: float, dy: float) -> "AbsBox":
        return AbsBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clipped(self, width: float, height: float) -> "AbsBox":
        return AbsBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


@dataclass(frozen=True)
class NormBox:
    """Center/size box as fractions of the image size (YOLO label layout)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise MalformedBox(f"non-finite normalized box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise MalformedBox(f"normalized center outside [0, 1]: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise MalformedBox(f"normalized size outside (0, 1]: {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def iou(a: AbsBox, b: AbsBox) -> float:
    """Intersection over union of two boxes.

    Returns 0 when the union is empty, so two identical zero-area boxes have
    IoU 0 rather than 1.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def to_absolute(n: NormBox, size: ImageSize) -> AbsBox:
    """Convert a normalized box to pixels, clipping it to the frame."""
    half_w, half_h = n.w / 2.0, n.h / 2.0
    box = AbsBox(
        (n.cx - half_w) * size.width,
        (n.cy - half_h) * size.height,
        (n.cx + half_w) * size.width,
        (n.cy + half_h) * size.height,
    )
    return box.clipped(size.width, size.height)


def to_normalized(a: AbsBox, size: ImageSize) -> NormBox:
    """Inverse of :func:`to_absolute` for boxes inside the frame.

    Overshoot up to ``FRAME_TOLERANCE`` pixels is clipped away; anything
    larger raises :class:`OutOfFrame`.
    """
    tol = FRAME_TOLERANCE
    W, H = size.width, size.height
    if a.x1 < -tol or a.y1 < -tol or a.x2 > W + tol or a.y2 > H + tol:
        raise OutOfFrame(f"box {a.as_tuple()} extends beyond {size}")
    a = a.clipped(W, H)
    if a.width <= 0.0 or a.height <= 0.0:
        raise MalformedBox(f"box {a.as_tuple()} has zero area")
    return NormBox(
        (a.x1 + a.x2) / 2.0 / W,
        (a.y1 + a.y2) / 2.0 / H,
        a.width / W,
        a.height / H,
    )
