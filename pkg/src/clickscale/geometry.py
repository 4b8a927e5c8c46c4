"""Boxes, clicks and the spatial predicates built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in image pixels; area is ``(x2-x1)*(y2-y1)``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def shifted(self, dx: float, dy: float) -> Box:
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Click:
    x: float
    y: float
    class_id: int
    image_id: str


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` arrays of x1,y1,x2,y2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def contains(b: Box, c: Click) -> bool:
    """Closed-boundary test: a click on the edge counts as inside."""
    return b.x1 <= c.x <= b.x2 and b.y1 <= c.y <= b.y2


def center_distance(b: Box, c: Click) -> float:
    cx, cy = b.center
    return math.hypot(cx - c.x, cy - c.y)


def clip(b: Box, width: int, height: int) -> Box:
    """Clamp ``b`` to ``[0, width] x [0, height]``.

    Raises ``ValueError`` if nothing of the box lies inside the image.
    """
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x1 >= x2 or y1 >= y2:
        raise ValueError(f"box {b.as_tuple()} lies outside the {width}x{height} image")
    return Box(x1, y1, x2, y2)


def pixel_extent(b: Box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel span ``[ix1, ix2) x [iy1, iy2)`` covered by ``b``.

    Outer rounding (floor / ceil), clamped to the image, at least one pixel
    on each axis. Cropping and CAM projection both go through this so the two
    always agree on where a proposal lives.
    """
    ix1 = min(max(int(math.floor(b.x1)), 0), width - 1)
    iy1 = min(max(int(math.floor(b.y1)), 0), height - 1)
    ix2 = min(max(int(math.ceil(b.x2)), ix1 + 1), width)
    iy2 = min(max(int(math.ceil(b.y2)), iy1 + 1), height)
    return ix1, iy1, ix2, iy2
