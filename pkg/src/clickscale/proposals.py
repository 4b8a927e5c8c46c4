"""Proposal ingestion/generation and click-guided proposal selection.

Selection per click:

1. keep proposals that contain the click,
2. sort them by distance from box center to click (stable, so ties keep
   input order),
3. walk the sorted list and keep a proposal only if its IoU with every
   proposal kept so far is at most ``t_iou``,
4. stop after ``top_n`` proposals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .csvio import ParseError, fmt, parse_float, parse_int, read_table, write_table
from .geometry import Box, Click, iou_matrix

PROPOSAL_HEADER = ("image_id", "x1", "y1", "x2", "y2")
CLICK_HEADER = ("image_id", "class_id", "x", "y")


class Source(str, Enum):
    ingested = "ingested"
    sliding_window = "sliding_window"


@dataclass(frozen=True)
class Proposal:
    box: Box
    image_id: str
    source: Source = Source.ingested


@dataclass(frozen=True)
class SelectionConfig:
    t_iou: float = 0.7
    top_n: int = 8

    def __post_init__(self):
        if not 0 < self.t_iou <= 1:
            raise ValueError(f"t_iou must lie in (0, 1], got {self.t_iou}")
        if self.top_n < 1:
            raise ValueError(f"top_n must be >= 1, got {self.top_n}")


def _positions(extent: float, window: float, step: float) -> list[float]:
    if window >= extent:
        return [0.0]
    out = list(np.arange(0.0, extent - window + 1e-9, step))
    if extent - window - out[-1] > 1e-9:
        out.append(extent - window)  # flush with the far edge
    return out


def generate_sliding_windows(
    width: int,
    height: int,
    scales=(0.15, 0.25, 0.35, 0.5, 0.7),
    aspect_ratios=(0.5, 1.0, 2.0),
    stride_fraction: float = 0.1,
    image_id: str = "",
) -> list[Proposal]:
    """Multi-scale grid of windows over a ``width x height`` image.

    A window at scale ``s`` and aspect ratio ``r`` measures
    ``s*width*sqrt(r)`` by ``s*height/sqrt(r)``, so ``s=1, r=1`` is the whole
    image. Windows step by ``stride_fraction`` of their own size, an extra
    window is added flush with the right/bottom edge when the grid falls
    short, coordinates are rounded to 0.01 px and clipped, and exact
    duplicates are dropped (first occurrence wins).
    """
    if not scales or not aspect_ratios:
        raise ValueError("scales and aspect_ratios must be non-empty")
    if not 0 < stride_fraction <= 1:
        raise ValueError("stride_fraction must lie in (0, 1]")
    seen: set[tuple] = set()
    out: list[Proposal] = []
    for s in scales:
        for r in aspect_ratios:
            w = s * width * math.sqrt(r)
            h = s * height / math.sqrt(r)
            for y in _positions(height, h, stride_fraction * h):
                for x in _positions(width, w, stride_fraction * w):
                    key = (
                        round(max(x, 0.0), 2),
                        round(max(y, 0.0), 2),
                        round(min(x + w, width), 2),
                        round(min(y + h, height), 2),
                    )
                    if key in seen or key[0] >= key[2] or key[1] >= key[3]:
                        continue
                    seen.add(key)
                    out.append(Proposal(Box(*key), image_id, Source.sliding_window))
    return out


def boxes_array(proposals) -> np.ndarray:
    if not proposals:
        return np.zeros((0, 4))
    return np.array([p.box.as_tuple() for p in proposals], dtype=np.float64)


def select_indices(boxes: np.ndarray, x: float, y: float, cfg: SelectionConfig) -> list[int]:
    """Indices into ``boxes`` (``(n, 4)`` array) chosen for a click at (x, y)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    inside = (boxes[:, 0] <= x) & (x <= boxes[:, 2]) & (boxes[:, 1] <= y) & (y <= boxes[:, 3])
    cand = np.flatnonzero(inside)
    if cand.size == 0:
        return []
    cx = (boxes[cand, 0] + boxes[cand, 2]) / 2
    cy = (boxes[cand, 1] + boxes[cand, 3]) / 2
    dist = np.hypot(cx - x, cy - y)
    order = cand[np.argsort(dist, kind="stable")]
    kept: list[int] = []
    for i in order:
        if kept and iou_matrix(boxes[i], boxes[kept]).max() > cfg.t_iou:
            continue
        kept.append(int(i))
        if len(kept) == cfg.top_n:
            break
    return kept


def select_for_click(proposals: list[Proposal], click: Click, cfg: SelectionConfig = SelectionConfig()) -> list[Proposal]:
    """Top proposals around ``click``; may return fewer than ``cfg.top_n``."""
    idx = select_indices(boxes_array(proposals), click.x, click.y, cfg)
    return [proposals[i] for i in idx]


# -- CSV ---------------------------------------------------------------------


def load_proposals(path) -> list[Proposal]:
    out = []
    for line, row in read_table(path, PROPOSAL_HEADER):
        coords = [parse_float(path, line, row[k], k) for k in PROPOSAL_HEADER[1:]]
        try:
            box = Box(*coords)
        except ValueError as e:
            raise ParseError(path, line, str(e)) from None
        out.append(Proposal(box, row["image_id"], Source.ingested))
    return out


def save_proposals(path, proposals: list[Proposal]) -> None:
    write_table(
        path,
        PROPOSAL_HEADER,
        ([p.image_id, *(fmt(v) for v in p.box.as_tuple())] for p in proposals),
    )


def group_by_image(proposals: list[Proposal]) -> dict[str, list[Proposal]]:
    groups: dict[str, list[Proposal]] = {}
    for p in proposals:
        groups.setdefault(p.image_id, []).append(p)
    return groups


def load_clicks(path) -> list[Click]:
    out = []
    for line, row in read_table(path, CLICK_HEADER):
        out.append(
            Click(
                x=parse_float(path, line, row["x"], "x"),
                y=parse_float(path, line, row["y"], "y"),
                class_id=parse_int(path, line, row["class_id"], "class_id"),
                image_id=row["image_id"],
            )
        )
    return out


def save_clicks(path, clicks: list[Click]) -> None:
    write_table(path, CLICK_HEADER, ([c.image_id, c.class_id, fmt(c.x), fmt(c.y)] for c in clicks))
