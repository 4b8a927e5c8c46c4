"""Pseudo ground-truth boxes from a fused CAM and its click.

Pixel ``(px, py)`` is treated as sitting at integer coordinates ``(px, py)``
when measuring distances to the click; the box half-extents are the largest
such distances over the discriminative region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cam import FusedCam, normalize_to_255
from .csvio import ParseError, fmt, parse_bool, parse_float, parse_int, read_table, write_table
from .geometry import Box, Click, clip

PSEUDO_HEADER = ("image_id", "class_id", "x1", "y1", "x2", "y2", "fallback")

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ThresholdConfig:
    t_cam_low: float = 80.0
    t_cam_high: float = 120.0
    label_count_switch: int = 2

    def __post_init__(self):
        if not 0 <= self.t_cam_low <= self.t_cam_high <= 255:
            raise ValueError("need 0 <= t_cam_low <= t_cam_high <= 255")


@dataclass(frozen=True)
class PseudoGroundTruth:
    box: Box
    class_id: int
    image_id: str
    source_click: Click | None
    fallback_used: bool = False


def pick_threshold(num_image_labels: int, cfg: ThresholdConfig = ThresholdConfig()) -> float:
    """Low threshold for images with few labels, high otherwise (ties go high)."""
    if num_image_labels < 1:
        raise ValueError("an image has at least one label")
    return cfg.t_cam_low if num_image_labels < cfg.label_count_switch else cfg.t_cam_high


def _click_pixel(click: Click, w: int, h: int) -> tuple[int, int]:
    px = min(max(int(math.floor(click.x + 0.5)), 0), w - 1)
    py = min(max(int(math.floor(click.y + 0.5)), 0), h - 1)
    return px, py


def components(fmap: np.ndarray, t: float) -> tuple[np.ndarray, int]:
    """8-connected labelling of ``fmap >= t`` (0 is background)."""
    return ndimage.label(np.asarray(fmap) >= t, structure=_EIGHT)


def discriminative_region(f: FusedCam | np.ndarray, t: float, click: Click) -> np.ndarray:
    """Boolean mask of the above-threshold component that the click belongs to.

    If the click's own pixel is below ``t``, the component holding the
    passing pixel nearest to the click is used instead (first in row-major
    order on distance ties). The mask is empty when nothing reaches ``t``.
    """
    fmap = f.map if isinstance(f, FusedCam) else np.asarray(f)
    h, w = fmap.shape
    labels, n = components(fmap, t)
    if n == 0:
        return np.zeros_like(labels, dtype=bool)
    px, py = _click_pixel(click, w, h)
    lab = labels[py, px]
    if lab == 0:
        ys, xs = np.nonzero(labels)
        d2 = (xs - click.x) ** 2 + (ys - click.y) ** 2
        j = int(np.argmin(d2))  # nonzero() is row-major, so argmin keeps scan order
        lab = labels[ys[j], xs[j]]
    return labels == lab


def centro_symmetric_box(region: np.ndarray, click: Click, image_w: int, image_h: int) -> Box:
    """Smallest box centred on the click that reaches every region pixel, clipped.

    A zero half-extent is widened to half a pixel so the box is never empty.
    """
    ys, xs = np.nonzero(region)
    if xs.size == 0:
        raise ValueError("empty region")
    hw = max(float(np.abs(xs - click.x).max()), 0.5)
    hh = max(float(np.abs(ys - click.y).max()), 0.5)
    return clip(Box(click.x - hw, click.y - hh, click.x + hw, click.y + hh), image_w, image_h)


def recenter(box: Box, click: Click, image_w: int, image_h: int) -> Box:
    hw, hh = box.width / 2, box.height / 2
    return clip(Box(click.x - hw, click.y - hh, click.x + hw, click.y + hh), image_w, image_h)


def default_fallback(click: Click, image_w: int, image_h: int) -> Box:
    side = max(min(image_w, image_h) / 4, 1.0)
    return recenter(Box(0, 0, side, side), click, image_w, image_h)


def generate(
    f: FusedCam,
    click: Click,
    num_image_labels: int,
    cfg: ThresholdConfig = ThresholdConfig(),
    image_w: int | None = None,
    image_h: int | None = None,
    fallback_box: Box | None = None,
) -> PseudoGroundTruth:
    """Normalize, threshold, and grow a click-centred box from the fused CAM.

    When nothing passes the threshold the result is ``fallback_box`` (the
    click's nearest selected proposal, typically) re-centred on the click, or
    a quarter-image square if no fallback box is given.
    """
    h, w = f.map.shape
    image_w = w if image_w is None else image_w
    image_h = h if image_h is None else image_h
    norm = normalize_to_255(f)
    region = discriminative_region(norm, pick_threshold(num_image_labels, cfg), click)
    if region.any():
        box = centro_symmetric_box(region, click, image_w, image_h)
        return PseudoGroundTruth(box, click.class_id, click.image_id, click, False)
    if fallback_box is not None:
        box = recenter(fallback_box, click, image_w, image_h)
    else:
        box = default_fallback(click, image_w, image_h)
    return PseudoGroundTruth(box, click.class_id, click.image_id, click, True)


def generate_unanchored(
    f: FusedCam,
    class_id: int,
    image_id: str,
    num_image_labels: int,
    cfg: ThresholdConfig = ThresholdConfig(),
) -> PseudoGroundTruth:
    """Box without a click: take the component at the map's peak and centre on its centroid."""
    norm = normalize_to_255(f)
    h, w = norm.map.shape
    if not norm.map.any():
        anchor = Click(w / 2, h / 2, class_id, image_id)
        return PseudoGroundTruth(default_fallback(anchor, w, h), class_id, image_id, None, True)
    labels, _ = components(norm.map, pick_threshold(num_image_labels, cfg))
    peak = np.unravel_index(int(np.argmax(norm.map)), norm.map.shape)
    region = labels == labels[peak]
    ys, xs = np.nonzero(region)
    anchor = Click(float(xs.mean()), float(ys.mean()), class_id, image_id)
    box = centro_symmetric_box(region, anchor, w, h)
    return PseudoGroundTruth(box, class_id, image_id, None, False)


# -- CSV ---------------------------------------------------------------------


def save_pseudo_gt(path, items: list[PseudoGroundTruth]) -> None:
    write_table(
        path,
        PSEUDO_HEADER,
        ([p.image_id, p.class_id, *(fmt(v) for v in p.box.as_tuple()), int(p.fallback_used)] for p in items),
    )


def load_pseudo_gt(path) -> list[PseudoGroundTruth]:
    out = []
    for line, row in read_table(path, PSEUDO_HEADER[:-1], optional=PSEUDO_HEADER[-1:]):
        coords = [parse_float(path, line, row[k], k) for k in ("x1", "y1", "x2", "y2")]
        try:
            box = Box(*coords)
        except ValueError as e:
            raise ParseError(path, line, str(e)) from None
        out.append(
            PseudoGroundTruth(
                box,
                parse_int(path, line, row["class_id"], "class_id"),
                row["image_id"],
                None,
                parse_bool(path, line, row.get("fallback", "0"), "fallback"),
            )
        )
    return out
