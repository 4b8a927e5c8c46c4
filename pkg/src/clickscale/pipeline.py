"""End-to-end stages: select -> train -> pseudo-GT -> evaluate.

Every stage reads its inputs from files and writes its outputs to
``out_dir``, so running the stages one by one gives the same bytes as
:func:`run_pipeline`. Work is split into independent per-image units that a
thread pool maps over; results are collected in input order, so
``worker_count`` never changes an output.

Files written to ``out_dir``::

    selected.csv        proposals chosen per click on the training set
    eval_selected.csv   same for the evaluation set (when it is separate)
    model.ckpt          trained classifier
    pseudo_gt.csv       image_id,class_id,x1,y1,x2,y2,fallback
    report.txt / .csv   CorLoc (and mAP when scores are available)
    cams/               optional per-click TNSR + PGM dumps
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from . import refnet
from .cam import CamMap, CamMethod, FusedCam, fuse, grad_cam_map, normalize_to_255, sa_cam_map
from .csvio import fmt, parse_float, parse_int, read_table, write_table
from .evaluation import GroundTruth, corloc, load_ground_truth, write_report
from .geometry import Box, Click, iou_matrix
from .imageio import read_ppm, to_chw, write_pgm
from .proposals import (
    Proposal,
    SelectionConfig,
    boxes_array,
    generate_sliding_windows,
    group_by_image,
    load_clicks,
    load_proposals,
    select_indices,
)
from .pseudogt import PseudoGroundTruth, ThresholdConfig, generate, generate_unanchored, load_pseudo_gt, save_pseudo_gt
from .synth import load_labels, oracle_fused_cam
from .tensor import save_tensor

log = logging.getLogger(__name__)

SELECTED_HEADER = ("image_id", "click_index", "class_id", "rank", "x1", "y1", "x2", "y2")


class WeakInfo(str, Enum):
    one_click = "one_click"
    image_label = "image_label"


class DataError(Exception):
    """Input data is missing or inconsistent (exit code 2 on the command line)."""


@dataclass(frozen=True)
class PipelineConfig:
    data_dir: Path = Path(".")
    out_dir: Path = Path("out")
    eval_dir: Path | None = None
    images: Path | None = None
    clicks: Path | None = None
    labels: Path | None = None
    proposals: str = "auto"
    eval_proposals: str = "auto"
    selection: SelectionConfig = SelectionConfig()
    thresholds: ThresholdConfig = ThresholdConfig()
    network: refnet.NetworkConfig = refnet.NetworkConfig()
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32
    gradient_layer: str = "conv3"
    cam_method: CamMethod = CamMethod.sa_cam
    weak_info: WeakInfo = WeakInfo.one_click
    seed: int = 0
    worker_count: int = 1
    window_scales: tuple[float, ...] = (0.25, 0.35, 0.5, 0.7, 1.0)
    window_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    window_stride: float = 0.1
    label_window_stride: float = 0.25
    oracle_cam: bool = False
    dump_cams: bool = False
    gradient_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cam_method", CamMethod(self.cam_method))
        object.__setattr__(self, "weak_info", WeakInfo(self.weak_info))
        if self.gradient_layer not in self.network.conv_names:
            raise ValueError(f"gradient_layer {self.gradient_layer!r} is not a conv layer of {self.network.conv_names}")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")

    def with_(self, **kw) -> PipelineConfig:
        return replace(self, **kw)


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    images_dir: Path
    clicks: list[Click]
    labels: dict[str, list[int]]
    gt_path: Path

    @classmethod
    def open(cls, root, images=None, clicks=None, labels=None) -> Dataset:
        root = Path(root)
        images = Path(images) if images else root / "images"
        clicks_p = Path(clicks) if clicks else root / "clicks.csv"
        labels_p = Path(labels) if labels else root / "labels.csv"
        for p in (images, clicks_p):
            if not p.exists():
                raise DataError(f"missing input: {p}")
        click_list = load_clicks(clicks_p)
        if labels_p.exists():
            lab = load_labels(labels_p)
        else:
            lab = {}
            for c in click_list:
                lab.setdefault(c.image_id, [])
                if c.class_id not in lab[c.image_id]:
                    lab[c.image_id].append(c.class_id)
        return cls(root, images, click_list, lab, root / "gt.csv")

    @cached_property
    def image_ids(self) -> list[str]:
        return sorted({c.image_id for c in self.clicks} | set(self.labels))

    @cached_property
    def clicks_by_image(self) -> dict[str, list[Click]]:
        out: dict[str, list[Click]] = {i: [] for i in self.image_ids}
        for c in self.clicks:
            out[c.image_id].append(c)
        return out

    def image(self, image_id: str) -> np.ndarray:
        path = self.images_dir / f"{image_id}.ppm"
        if not path.exists():
            raise DataError(f"missing image {path}")
        return to_chw(read_ppm(path))

    def num_labels(self, image_id: str) -> int:
        return max(len(self.labels.get(image_id, ())), 1)

    def ground_truth(self) -> list[GroundTruth]:
        if not self.gt_path.exists():
            raise DataError(f"missing ground truth {self.gt_path}")
        return load_ground_truth(self.gt_path)


def train_dataset(cfg: PipelineConfig) -> Dataset:
    return Dataset.open(cfg.data_dir, cfg.images, cfg.clicks, cfg.labels)


def eval_dataset(cfg: PipelineConfig) -> Dataset:
    if cfg.eval_dir is None:
        return train_dataset(cfg)
    return Dataset.open(cfg.eval_dir)


def _proposal_source(cfg: PipelineConfig, spec: str, stride: float | None = None):
    """Callable ``(image_id, width, height) -> list[Proposal]``."""
    if spec != "auto":
        path = Path(spec)
        if not path.exists():
            raise DataError(f"missing proposals file {path}")
        groups = group_by_image(load_proposals(path))
        return lambda image_id, w, h: groups.get(image_id, [])
    stride = cfg.window_stride if stride is None else stride
    cache: dict[tuple[int, int], list[Proposal]] = {}

    def windows(image_id: str, w: int, h: int) -> list[Proposal]:
        if (w, h) not in cache:
            cache[(w, h)] = generate_sliding_windows(w, h, cfg.window_scales, cfg.window_ratios, stride)
        return [Proposal(p.box, image_id, p.source) for p in cache[(w, h)]]

    return windows


def _map(cfg: PipelineConfig, fn, items):
    items = list(items)
    if cfg.worker_count == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=cfg.worker_count) as pool:
        return list(pool.map(fn, items))


# -- select ------------------------------------------------------------------


@dataclass(frozen=True)
class SelectedRow:
    image_id: str
    click_index: int
    class_id: int
    rank: int
    box: Box


def _select_image(cfg: PipelineConfig, data: Dataset, source, image_id: str) -> list[SelectedRow]:
    clicks = data.clicks_by_image[image_id]
    if not clicks:
        return []
    _, h, w = data.image(image_id).shape
    props = source(image_id, w, h)
    arr = boxes_array(props)
    rows = []
    for ci, click in enumerate(clicks):
        idx = select_indices(arr, click.x, click.y, cfg.selection)
        if not idx:
            log.warning("no proposal contains click %d of %s at (%.2f, %.2f)", ci, image_id, click.x, click.y)
        rows += [SelectedRow(image_id, ci, click.class_id, r, props[i].box) for r, i in enumerate(idx)]
    return rows


def select_dataset(cfg: PipelineConfig, data: Dataset, proposals: str) -> list[SelectedRow]:
    source = _proposal_source(cfg, proposals)
    per_image = _map(cfg, lambda i: _select_image(cfg, data, source, i), data.image_ids)
    return [r for rows in per_image for r in rows]


def save_selected(path, rows: list[SelectedRow]) -> None:
    write_table(
        path,
        SELECTED_HEADER,
        ([r.image_id, r.click_index, r.class_id, r.rank, *(fmt(v) for v in r.box.as_tuple())] for r in rows),
    )


def load_selected(path) -> list[SelectedRow]:
    out = []
    for line, row in read_table(path, SELECTED_HEADER):
        box = Box(*(parse_float(path, line, row[k], k) for k in ("x1", "y1", "x2", "y2")))
        out.append(
            SelectedRow(
                row["image_id"],
                parse_int(path, line, row["click_index"], "click_index"),
                parse_int(path, line, row["class_id"], "class_id"),
                parse_int(path, line, row["rank"], "rank"),
                box,
            )
        )
    return out


def cmd_select(cfg: PipelineConfig) -> list[Path]:
    """Select proposals for every click; writes ``selected.csv`` (and ``eval_selected.csv``)."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rows = select_dataset(cfg, train_dataset(cfg), cfg.proposals)
    save_selected(cfg.out_dir / "selected.csv", rows)
    written.append(cfg.out_dir / "selected.csv")
    log.info("selected %d proposals for the training clicks", len(rows))
    if cfg.eval_dir is not None:
        rows = select_dataset(cfg, eval_dataset(cfg), cfg.eval_proposals)
        save_selected(cfg.out_dir / "eval_selected.csv", rows)
        written.append(cfg.out_dir / "eval_selected.csv")
        log.info("selected %d proposals for the evaluation clicks", len(rows))
    return written


# -- train -------------------------------------------------------------------


def training_samples(cfg: PipelineConfig, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    side = cfg.network.input_side
    if cfg.weak_info is WeakInfo.image_label:
        ids = [i for i in data.image_ids if len(data.labels.get(i, ())) == 1]
        x = [refnet.extract_patch(img, Box(0, 0, img.shape[2], img.shape[1]), side) for img in map(data.image, ids)]
        y = [data.labels[i][0] for i in ids]
    else:
        sel_path = cfg.out_dir / "selected.csv"
        if not sel_path.exists():
            raise DataError(f"missing {sel_path}; run the select stage first")
        rows = load_selected(sel_path)
        by_image: dict[str, list[SelectedRow]] = {}
        for r in rows:
            by_image.setdefault(r.image_id, []).append(r)

        def crops(image_id):
            img = data.image(image_id)
            return [refnet.extract_patch(img, r.box, side) for r in by_image[image_id]]

        x = [p for ps in _map(cfg, crops, sorted(by_image)) for p in ps]
        y = [r.class_id for i in sorted(by_image) for r in by_image[i]]
    if not x:
        raise DataError("no training samples")
    return np.stack(x), np.asarray(y, dtype=np.intp)


def cmd_train(cfg: PipelineConfig) -> refnet.TrainedNetwork:
    """Train the classifier on the selected patches and write ``model.ckpt``."""
    data = train_dataset(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    x, y = training_samples(cfg, data)
    net = refnet.train(cfg.network, (x, y), cfg.epochs, cfg.lr, cfg.batch_size)
    if net.history:
        (l0, _), (l1, acc) = net.history
        log.info("training accuracy %.4f (loss %.4f -> %.4f on %d patches)", acc, l0, l1, len(x))
    refnet.save_checkpoint(cfg.out_dir / "model.ckpt", net)
    return net


# -- pseudo ground truth -------------------------------------------------------


def _cam_maps(cfg: PipelineConfig, acts: np.ndarray, grads: np.ndarray) -> list[np.ndarray]:
    fn = sa_cam_map if cfg.cam_method is CamMethod.sa_cam else grad_cam_map
    return [fn(a, g) for a, g in zip(acts, grads)]


def fused_cam_for(
    cfg: PipelineConfig, net: refnet.TrainedNetwork, image: np.ndarray, boxes: list[Box], class_id: int
) -> FusedCam:
    """Capture, CAM and fuse the given proposals of one image for one class."""
    _, h, w = image.shape
    if not boxes:
        return fuse([], w, h, class_id)
    side = net.config.input_side
    patches = np.stack([refnet.extract_patch(image, b, side) for b in boxes])
    acts, grads = refnet.capture_batch(net, patches, class_id, cfg.gradient_layer)
    if cfg.gradient_scale != 1.0:
        grads = grads * cfg.gradient_scale
    cams = [CamMap(m, b, class_id, cfg.cam_method) for m, b in zip(_cam_maps(cfg, acts, grads), boxes)]
    return fuse(cams, w, h, class_id)


def _oracle_gt(click: Click, gts: list[GroundTruth]) -> GroundTruth | None:
    best, best_d = None, np.inf
    for g in gts:
        if g.image_id == click.image_id and g.class_id == click.class_id:
            cx, cy = g.box.center
            d = (cx - click.x) ** 2 + (cy - click.y) ** 2
            if d < best_d:
                best, best_d = g, d
    return best


def _dump(cfg: PipelineConfig, name: str, fused: FusedCam) -> None:
    d = cfg.out_dir / "cams"
    d.mkdir(exist_ok=True)
    save_tensor(d / f"{name}.tnsr", fused.map)
    write_pgm(d / f"{name}.pgm", np.rint(normalize_to_255(fused).map).astype(np.uint8))


def _pseudo_one_click(cfg, net, data: Dataset, selected, gts, image_id: str) -> list[tuple]:
    clicks = data.clicks_by_image[image_id]
    if not clicks:
        return []
    image = data.image(image_id)
    _, h, w = image.shape
    out = []
    for ci, click in enumerate(clicks):
        boxes = [r.box for r in selected.get((image_id, ci), [])]
        if cfg.oracle_cam:
            g = _oracle_gt(click, gts)
            fused = oracle_fused_cam(g, w, h) if g is not None else fuse([], w, h, click.class_id)
        else:
            fused = fused_cam_for(cfg, net, image, boxes, click.class_id)
        if cfg.dump_cams:
            _dump(cfg, f"{image_id}_{ci}", fused)
        pg = generate(fused, click, data.num_labels(image_id), cfg.thresholds, w, h, boxes[0] if boxes else None)
        out.append(((image_id, click.class_id, ci), pg))
    return out


def score_proposals(net: refnet.TrainedNetwork, image: np.ndarray, props: list[Proposal]) -> np.ndarray:
    """Class logits ``(len(props), num_classes)`` of every proposal crop."""
    side = net.config.input_side
    out = [np.zeros((0, net.config.num_classes))]
    for i in range(0, len(props), 256):
        patches = np.stack([refnet.extract_patch(image, p.box, side) for p in props[i : i + 256]])
        out.append(refnet.logits(net, patches))
    return np.concatenate(out)


def rank_by_score(cfg: PipelineConfig, props: list[Proposal], scores: np.ndarray) -> list[Box]:
    """Top proposals by score with the same overlap suppression as click selection."""
    if not props:
        return []
    order = np.argsort(-scores, kind="stable")
    arr = boxes_array(props)
    kept: list[int] = []
    for i in order:
        if kept and iou_matrix(arr[i], arr[kept]).max() > cfg.selection.t_iou:
            continue
        kept.append(int(i))
        if len(kept) == cfg.selection.top_n:
            break
    return [props[i].box for i in kept]


def _pseudo_image_label(cfg, net, data: Dataset, source, image_id: str) -> list[tuple]:
    labels = data.labels.get(image_id, [])
    if not labels:
        return []
    image = data.image(image_id)
    _, h, w = image.shape
    props = source(image_id, w, h)
    scores = score_proposals(net, image, props)
    out = []
    for c in labels:
        boxes = rank_by_score(cfg, props, scores[:, c])
        fused = fused_cam_for(cfg, net, image, boxes, c)
        if cfg.dump_cams:
            _dump(cfg, f"{image_id}_class{c}", fused)
        pg = generate_unanchored(fused, c, image_id, data.num_labels(image_id), cfg.thresholds)
        out.append(((image_id, c, 0), pg))
    return out


def _group_selected(rows: list[SelectedRow]) -> dict[tuple[str, int], list[SelectedRow]]:
    out: dict[tuple[str, int], list[SelectedRow]] = {}
    for r in rows:
        out.setdefault((r.image_id, r.click_index), []).append(r)
    for v in out.values():
        v.sort(key=lambda r: r.rank)
    return out


def make_pseudo_gt(cfg: PipelineConfig, net: refnet.TrainedNetwork | None = None) -> list[PseudoGroundTruth]:
    """Pseudo-GT for the evaluation set, sorted by (image, class, click order)."""
    data = eval_dataset(cfg)
    if net is None and not cfg.oracle_cam:
        ckpt = cfg.out_dir / "model.ckpt"
        if not ckpt.exists():
            raise DataError(f"missing {ckpt}; run the train stage first")
        net = refnet.load_checkpoint(ckpt)
    if cfg.weak_info is WeakInfo.image_label:
        spec = cfg.eval_proposals if cfg.eval_dir is not None else cfg.proposals
        source = _proposal_source(cfg, spec, cfg.label_window_stride)
        units = _map(cfg, lambda i: _pseudo_image_label(cfg, net, data, source, i), data.image_ids)
    else:
        sel_name = "eval_selected.csv" if cfg.eval_dir is not None else "selected.csv"
        sel_path = cfg.out_dir / sel_name
        if not sel_path.exists():
            raise DataError(f"missing {sel_path}; run the select stage first")
        selected = _group_selected(load_selected(sel_path))
        gts = data.ground_truth() if cfg.oracle_cam else []
        units = _map(cfg, lambda i: _pseudo_one_click(cfg, net, data, selected, gts, i), data.image_ids)
    keyed = [kv for unit in units for kv in unit]
    keyed.sort(key=lambda kv: kv[0])
    return [pg for _, pg in keyed]


def cmd_pseudogt(cfg: PipelineConfig) -> list[PseudoGroundTruth]:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    items = make_pseudo_gt(cfg)
    save_pseudo_gt(cfg.out_dir / "pseudo_gt.csv", items)
    n_fb = sum(p.fallback_used for p in items)
    log.info("wrote %d pseudo boxes (%d fallbacks)", len(items), n_fb)
    return items


# -- eval --------------------------------------------------------------------


def evaluate_files(pred_path, gt_path, report_prefix=None, num_classes: int | None = None):
    """CorLoc of a pseudo-GT CSV (or mAP + CorLoc of a detections CSV) against a GT CSV."""
    from .evaluation import DET_HEADER, load_detections, per_class_ap

    pred_path, gt_path = Path(pred_path), Path(gt_path)
    for p in (pred_path, gt_path):
        if not p.exists():
            raise DataError(f"missing input: {p}")
    gts = load_ground_truth(gt_path)
    with pred_path.open() as fh:
        header = fh.readline().strip().split(",")
    aps = None
    if header == list(DET_HEADER):
        dets = load_detections(pred_path)
        n = num_classes if num_classes is not None else max([g.class_id for g in gts] + [d.class_id for d in dets] + [0]) + 1
        aps = per_class_ap(dets, gts, n)
        preds = [(d.image_id, d.class_id, d.box) for d in dets]
    else:
        preds = [(p.image_id, p.class_id, p.box) for p in load_pseudo_gt(pred_path)]
    cl = corloc(preds, gts, num_classes)
    if report_prefix is not None:
        write_report(report_prefix, cl, aps)
    return cl, aps


def cmd_eval(cfg: PipelineConfig, pred_path=None, gt_path=None):
    pred_path = pred_path or cfg.out_dir / "pseudo_gt.csv"
    gt_path = gt_path or eval_dataset(cfg).gt_path
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cl, aps = evaluate_files(pred_path, gt_path, cfg.out_dir / "report", cfg.network.num_classes)
    log.info("CorLoc %.4f", cl.mean)
    return cl, aps


def run_pipeline(cfg: PipelineConfig):
    """All stages in order; returns the CorLoc result."""
    if cfg.weak_info is WeakInfo.one_click and not cfg.oracle_cam:
        cmd_select(cfg)
        cmd_train(cfg)
    elif cfg.weak_info is WeakInfo.one_click:
        cmd_select(cfg)
    else:
        cmd_train(cfg)
    cmd_pseudogt(cfg)
    cl, _ = cmd_eval(cfg)
    return cl


# -- config files ------------------------------------------------------------

_NESTED = {
    "t_iou": ("selection", float),
    "top_n": ("selection", int),
    "t_cam_low": ("thresholds", float),
    "t_cam_high": ("thresholds", float),
    "label_count_switch": ("thresholds", int),
    "input_side": ("network", int),
    "num_classes": ("network", int),
    "net_seed": ("network", int),
    "layers": ("network", refnet.parse_layers),
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _top_level_types() -> dict:
    conv = {
        "data_dir": Path, "out_dir": Path, "eval_dir": Path, "images": Path, "clicks": Path, "labels": Path,
        "proposals": str, "eval_proposals": str, "epochs": int, "lr": float, "batch_size": int,
        "gradient_layer": str, "cam_method": CamMethod, "weak_info": WeakInfo, "seed": int,
        "worker_count": int, "window_scales": _floats, "window_ratios": _floats, "window_stride": float,
        "label_window_stride": float, "oracle_cam": _bool, "dump_cams": _bool, "gradient_scale": float,
    }
    assert set(conv) == {f.name for f in fields(PipelineConfig)} - {"selection", "thresholds", "network"}
    return conv


CONFIG_KEYS = sorted(set(_top_level_types()) | set(_NESTED))


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in CONFIG_KEYS:
            raise ValueError(f"config line {n}: unknown key {k!r}")
        out[k] = v
    return out


def build_config(values: dict[str, str]) -> PipelineConfig:
    """PipelineConfig from ``key=value`` strings; unknown keys are rejected."""
    top = _top_level_types()
    kw, nested = {}, {"selection": {}, "thresholds": {}, "network": {}}
    for k, v in values.items():
        if k in top:
            kw[k] = top[k](v)
        elif k in _NESTED:
            group, conv = _NESTED[k]
            nested[group]["seed" if k == "net_seed" else k] = conv(v)
        else:
            raise ValueError(f"unknown config key {k!r}")
    kw["selection"] = SelectionConfig(**nested["selection"])
    kw["thresholds"] = ThresholdConfig(**nested["thresholds"])
    net_kw = nested["network"]
    net_kw.setdefault("seed", kw.get("seed", 0))
    kw["network"] = refnet.NetworkConfig(**net_kw)
    return PipelineConfig(**kw)
