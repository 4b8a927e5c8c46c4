"""Class activation maps: Grad-CAM, spatial-attention CAM, and fusion.

``grad_cam`` weights each activation channel by the spatial mean of its
gradient and rectifies the weighted sum. ``sa_cam`` instead rectifies the
gradient pixel by pixel and multiplies it into the activation before summing
channels, so negative evidence at one location cannot cancel positive
evidence elsewhere in the same channel.

``fuse`` resizes each per-proposal map to its proposal's pixel extent and
adds it into an image-sized accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Box, pixel_extent
from .refnet import ActivationRecord
from .tensor import bilinear_upsample, global_average_pool


class CamMethod(str, Enum):
    grad_cam = "grad_cam"
    sa_cam = "sa_cam"


@dataclass(frozen=True)
class CamMap:
    map: np.ndarray  # (H, W) at the captured layer's resolution
    proposal_box: Box
    target_class: int
    method: CamMethod


@dataclass(frozen=True)
class FusedCam:
    map: np.ndarray  # (image_h, image_w)
    target_class: int
    contributing_proposals: int


def grad_cam_map(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    weights = global_average_pool(gradient)
    return np.maximum(np.einsum("k,khw->hw", weights, activation), 0.0)


def sa_cam_map(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    return (np.maximum(gradient, 0.0) * activation).sum(axis=0)


def grad_cam(rec: ActivationRecord, proposal_box: Box | None = None) -> CamMap:
    return CamMap(grad_cam_map(rec.activation, rec.gradient), proposal_box, rec.target_class, CamMethod.grad_cam)


def sa_cam(rec: ActivationRecord, proposal_box: Box | None = None) -> CamMap:
    return CamMap(sa_cam_map(rec.activation, rec.gradient), proposal_box, rec.target_class, CamMethod.sa_cam)


def compute_cam(rec: ActivationRecord, method: CamMethod | str, proposal_box: Box | None = None) -> CamMap:
    method = CamMethod(method)
    return sa_cam(rec, proposal_box) if method is CamMethod.sa_cam else grad_cam(rec, proposal_box)


def project(cam: CamMap, image_w: int, image_h: int, out: np.ndarray | None = None) -> np.ndarray:
    """Add ``cam`` into ``out`` at its proposal's position, resized to fit."""
    if out is None:
        out = np.zeros((image_h, image_w))
    x1, y1, x2, y2 = pixel_extent(cam.proposal_box, image_w, image_h)
    out[y1:y2, x1:x2] += bilinear_upsample(cam.map, y2 - y1, x2 - x1)
    return out


def fuse(cams: list[CamMap], image_w: int, image_h: int, target_class: int | None = None) -> FusedCam:
    """Sum of every CAM projected back into image coordinates.

    All maps must share one target class. ``target_class`` only matters for
    an empty list, whose result is an all-zero map.
    """
    classes = {c.target_class for c in cams}
    if len(classes) > 1:
        raise ValueError(f"cannot fuse CAMs of different classes {sorted(classes)}")
    if cams:
        target_class = cams[0].target_class
    acc = np.zeros((image_h, image_w))
    for cam in cams:
        project(cam, image_w, image_h, acc)
    return FusedCam(acc, -1 if target_class is None else target_class, len(cams))


def normalize_to_255(f: FusedCam) -> FusedCam:
    """Min-max rescale to ``[0, 255]``.

    A constant map has no range to stretch: it becomes all 255 if positive
    and all 0 otherwise.
    """
    m = f.map
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        out = (m - lo) / (hi - lo) * 255.0
    else:
        out = np.full_like(m, 255.0 if hi > 0 else 0.0)
    return FusedCam(out, f.target_class, f.contributing_proposals)
