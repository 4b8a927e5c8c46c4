"""Deterministic synthetic scenes with known boxes and center clicks.

Each class is a family (shape, texture, colour): striped rectangles, dotted
ellipses, checkered triangles and so on, drawn on a smooth grey background
with desaturated clutter. Objects never overlap, and every object's shape
touches all four sides of its ground-truth box.

A dataset directory looks like::

    images/<image_id>.ppm
    gt.csv       image_id,class_id,x1,y1,x2,y2,difficult
    clicks.csv   image_id,class_id,x,y
    labels.csv   image_id,class_id   (distinct classes per image)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cam import FusedCam
from .csvio import parse_int, read_table, write_table
from .evaluation import GroundTruth, save_ground_truth
from .geometry import Box, Click, pixel_extent
from .imageio import write_ppm
from .proposals import save_clicks
from .tensor import bilinear_upsample

LABEL_HEADER = ("image_id", "class_id")

# (shape, texture, rgb)
FAMILIES = [
    ("rect", "hstripes", (205, 45, 40)),
    ("ellipse", "dots", (40, 185, 60)),
    ("triangle", "checker", (50, 80, 215)),
    ("diamond", "vstripes", (225, 200, 40)),
    ("ellipse", "checker", (200, 50, 200)),
    ("rect", "dots", (40, 200, 210)),
]


@dataclass(frozen=True)
class SceneSpec:
    width: int = 96
    height: int = 96
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 3)
    click_noise_sigma: float = 0.0
    seed: int = 0
    min_size: int = 16
    max_size: int = 44
    image_prefix: str = "img"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("bad objects_per_image range")
        if self.max_size > min(self.width, self.height) or self.min_size < 4 or self.min_size > self.max_size:
            raise ValueError("object sizes must fit inside the image")


@dataclass
class Scene:
    image_id: str
    image: np.ndarray  # (H, W, 3) uint8
    objects: list[GroundTruth] = field(default_factory=list)
    clicks: list[Click] = field(default_factory=list)

    @property
    def labels(self) -> list[int]:
        return sorted({g.class_id for g in self.objects})


def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w  # 0..1 across the box
    v = (yy + 0.5) / h
    if shape == "rect":
        m = np.ones((h, w), dtype=bool)
    elif shape == "ellipse":
        m = (2 * u - 1) ** 2 + (2 * v - 1) ** 2 <= 1.0
    elif shape == "triangle":
        m = np.abs(2 * u - 1) <= v
    elif shape == "diamond":
        m = np.abs(2 * u - 1) + np.abs(2 * v - 1) <= 1.0
    else:
        raise ValueError(shape)
    # force the silhouette to reach every side of the box
    if shape in ("ellipse", "diamond"):
        m[h // 2, :] = True
        m[:, w // 2] = True
    elif shape == "triangle":
        m[-1, :] = True
        m[:, w // 2] = True
    return m


def _texture(texture: str, w: int, h: int, phase: tuple[int, int]) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + phase[1]
    xx = xx + phase[0]
    if texture == "hstripes":
        return (yy // 2) % 2 == 0
    if texture == "vstripes":
        return (xx // 2) % 2 == 0
    if texture == "checker":
        return ((xx // 3) + (yy // 3)) % 2 == 0
    if texture == "dots":
        return ((xx % 5) - 2) ** 2 + ((yy % 5) - 2) ** 2 <= 2
    raise ValueError(texture)


def _background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    base = rng.uniform(90, 160)
    coarse = rng.normal(0, 22, size=(6, 6))
    field_ = bilinear_upsample(coarse, h, w)
    tint = rng.normal(0, 4, size=3)
    img = base + field_[:, :, None] + tint[None, None, :]
    for _ in range(int(rng.integers(3, 7))):
        cw, ch = int(rng.integers(3, 30)), int(rng.integers(3, 30))
        cx, cy = int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))
        img[cy : cy + ch, cx : cx + cw, :] = rng.uniform(60, 200) + rng.normal(0, 4, size=3)
    return img


def _place(rng: np.random.Generator, spec: SceneSpec, taken: list[Box], margin: int = 3) -> Box | None:
    for _ in range(200):
        w = int(rng.integers(spec.min_size, spec.max_size + 1))
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        x = int(rng.integers(0, spec.width - w + 1))
        y = int(rng.integers(0, spec.height - h + 1))
        if all(
            x + w + margin <= b.x1 or b.x2 + margin <= x or y + h + margin <= b.y1 or b.y2 + margin <= y
            for b in taken
        ):
            return Box(x, y, x + w, y + h)
    return None


def _click_for(rng: np.random.Generator, box: Box, class_id: int, image_id: str, sigma: float) -> Click:
    cx, cy = box.center
    if sigma > 0:
        cx += rng.normal(0, sigma)
        cy += rng.normal(0, sigma)
    cx = round(min(max(cx, box.x1), box.x2), 2)
    cy = round(min(max(cy, box.y1), box.y2), 2)
    return Click(cx, cy, class_id, image_id)


def generate_scene(rng: np.random.Generator, spec: SceneSpec, image_id: str) -> Scene:
    w, h = spec.width, spec.height
    img = _background(rng, w, h)
    scene = Scene(image_id, img)
    lo, hi = spec.objects_per_image
    taken: list[Box] = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        box = _place(rng, spec, taken)
        if box is None:
            continue
        taken.append(box)
        cls = int(rng.integers(0, spec.num_classes))
        shape, texture, rgb = FAMILIES[cls % len(FAMILIES)]
        x1, y1, x2, y2 = (int(v) for v in box.as_tuple())
        bw, bh = x2 - x1, y2 - y1
        mask = _shape_mask(shape, bw, bh)
        on = _texture(texture, bw, bh, (int(rng.integers(0, 6)), int(rng.integers(0, 6))))
        color = np.asarray(rgb, dtype=np.float64) * rng.uniform(0.85, 1.1)
        patch = np.where(on[:, :, None], color, color * 0.55)
        region = img[y1:y2, x1:x2]
        region[mask] = patch[mask]
        scene.objects.append(GroundTruth(image_id, cls, box))
        scene.clicks.append(_click_for(rng, box, cls, image_id, spec.click_noise_sigma))
    img += rng.normal(0, 5, size=img.shape)
    scene.image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return scene


def generate_scenes(spec: SceneSpec, count: int) -> list[Scene]:
    """In-memory scenes; a pure function of ``(spec, count)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(spec.seed)
    return [generate_scene(rng, spec, f"{spec.image_prefix}{i:05d}") for i in range(count)]


def write_scenes(scenes: list[Scene], out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_ppm(out / "images" / f"{s.image_id}.ppm", s.image)
    save_ground_truth(out / "gt.csv", [g for s in scenes for g in s.objects])
    save_clicks(out / "clicks.csv", [c for s in scenes for c in s.clicks])
    save_labels(out / "labels.csv", {s.image_id: s.labels for s in scenes})
    return out


def generate_dataset(spec: SceneSpec, count: int, out_dir) -> Path:
    """Write ``count`` scenes (PPM images plus GT, click and label CSVs) under ``out_dir``."""
    return write_scenes(generate_scenes(spec, count), out_dir)


def save_labels(path, labels: dict[str, list[int]]) -> None:
    write_table(path, LABEL_HEADER, ([img, c] for img, cs in labels.items() for c in cs))


def load_labels(path) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for line, row in read_table(path, LABEL_HEADER):
        out.setdefault(row["image_id"], []).append(parse_int(path, line, row["class_id"], "class_id"))
    return {k: sorted(set(v)) for k, v in out.items()}


def oracle_fused_cam(gt: GroundTruth, image_w: int, image_h: int) -> FusedCam:
    """A perfect CAM: 255 on the pixels covered by ``gt.box``, 0 elsewhere."""
    m = np.zeros((image_h, image_w))
    x1, y1, x2, y2 = pixel_extent(gt.box, image_w, image_h)
    m[y1:y2, x1:x2] = 255.0
    return FusedCam(m, gt.class_id, 1)
