from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidInputError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in frame pixels, centre convention."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidInputError(f"box must have positive size, got {self.w}x{self.h}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """From the top-left convention used by ``groundtruth.txt``."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return min(1.0, max(0.0, inter / union))


def cle(a: BBox, b: BBox) -> float:
    """Centre location error in pixels."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)
