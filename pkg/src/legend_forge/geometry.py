"""Axis-aligned boxes and coordinate frames.

A :class:`Frame` is a rectangle whose origin is given in the parent (full
map) pixel system. Boxes are always expressed in *some* frame's local
coordinates; the full-map frame has origin (0, 0), so full-map boxes are
local to it. :func:`translate` moves a box between frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import InvalidBox, OutOfFrame, ValidationError

# Slop allowed at frame edges before a box counts as outside (annotation
# jitter at crop borders).
FRAME_TOLERANCE = 1.0


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        for c in coords:
            if isinstance(c, bool) or not isinstance(c, (int, float)):
                raise InvalidBox(f"non-numeric coordinate in {coords!r}")
            if not math.isfinite(c):
                raise InvalidBox(f"non-finite coordinate in {coords!r}")
            if c < 0:
                raise InvalidBox(f"negative coordinate in {coords!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"degenerate or reversed box {coords!r}")
        # Normalise ints so equality and hashing behave the same for 1 and 1.0.
        for name, c in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, float(c))

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise InvalidBox(f"expected 4 coordinates, got {len(values)}")
        return cls(*values)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Frame:
    origin_x: float
    origin_y: float
    width: float
    height: float

    def __post_init__(self) -> None:
        vals = (self.origin_x, self.origin_y, self.width, self.height)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite frame {vals!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"frame must have positive extent, got {vals!r}")
        if self.origin_x < 0 or self.origin_y < 0:
            raise ValidationError(f"frame origin must be non-negative, got {vals!r}")
        for name, v in zip(("origin_x", "origin_y", "width", "height"), vals):
            object.__setattr__(self, name, float(v))

    @property
    def x2(self) -> float:
        return self.origin_x + self.width

    @property
    def y2(self) -> float:
        return self.origin_y + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    def local(self) -> "Frame":
        """The same extent with origin (0, 0), i.e. the frame's own pixel grid."""
        return Frame(0.0, 0.0, self.width, self.height)

    def enclosing(self) -> "Frame":
        """Smallest 0-based parent frame that contains this one."""
        return Frame(0.0, 0.0, self.x2, self.y2)

    def contains(self, box: BBox, tolerance: float = FRAME_TOLERANCE) -> bool:
        """Whether ``box`` (in parent coordinates) lies inside this frame's region."""
        return (
            box.x1 >= self.origin_x - tolerance
            and box.y1 >= self.origin_y - tolerance
            and box.x2 <= self.x2 + tolerance
            and box.y2 <= self.y2 + tolerance
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "width": self.width,
            "height": self.height,
        }


def area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)


def gap(a: BBox, b: BBox) -> float:
    """Euclidean distance between the closest points of two boxes (0 if they touch)."""
    dx = max(0.0, max(a.x1, b.x1) - min(a.x2, b.x2))
    dy = max(0.0, max(a.y1, b.y1) - min(a.y2, b.y2))
    return math.hypot(dx, dy)


def translate(b: BBox, src: Frame, dst: Frame, tolerance: float = FRAME_TOLERANCE) -> BBox:
    """Re-express ``b`` (local to ``src``) in the local coordinates of ``dst``.

    Both the input and the result must lie within their frames up to
    ``tolerance`` pixels; protrusion inside the tolerance is clamped away.
    """
    if not src.local().contains(b, tolerance):
        raise OutOfFrame(f"{b.as_list()} lies outside its source frame {src.as_dict()}")
    dx = src.origin_x - dst.origin_x
    dy = src.origin_y - dst.origin_y
    x1, y1, x2, y2 = b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy
    if x1 < -tolerance or y1 < -tolerance or x2 > dst.width + tolerance or y2 > dst.height + tolerance:
        raise OutOfFrame(
            f"{b.as_list()} shifted by ({dx}, {dy}) falls outside target frame {dst.as_dict()}"
        )
    # Clamping only touches sub-tolerance slop; boxes inside dst are untouched.
    try:
        return BBox(max(x1, 0.0), max(y1, 0.0), min(x2, dst.width), min(y2, dst.height))
    except InvalidBox as exc:
        raise OutOfFrame(f"{b.as_list()} collapses at the edge of {dst.as_dict()}") from exc

