"""VOC-style localisation metrics: CorLoc and (11-point) average precision.

Matching is greedy: predictions are visited in order (CorLoc: list order,
AP: descending score, ties by list order) and each takes the still-unmatched
same-image, same-class ground truth with the highest IoU, provided that IoU
exceeds 0.5. A prediction that instead overlaps a ``difficult`` ground truth
by more than 0.5 is ignored; difficult objects never count towards totals.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .csvio import ParseError, fmt, parse_bool, parse_float, parse_int, read_table, write_table
from .geometry import Box, iou

IOU_THRESHOLD = 0.5
GT_HEADER = ("image_id", "class_id", "x1", "y1", "x2", "y2", "difficult")
DET_HEADER = ("image_id", "class_id", "x1", "y1", "x2", "y2", "score")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: Box
    difficult: bool = False


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass
class CorLocResult:
    per_class: dict[int, float]
    mean: float
    counts: dict[int, tuple[int, int]]  # class -> (correct, counted)


class _Matcher:
    """One-shot GT bookkeeping for a single evaluation."""

    def __init__(self, gts):
        self.easy = defaultdict(list)
        self.hard = defaultdict(list)
        for g in gts:
            (self.hard if g.difficult else self.easy)[(g.image_id, g.class_id)].append(g.box)
        self.used = defaultdict(set)

    def match(self, image_id: str, class_id: int, box: Box) -> bool | None:
        """True for a hit, False for a miss, None when the prediction is ignored."""
        key = (image_id, class_id)
        best, best_j = -1.0, -1
        for j, g in enumerate(self.easy.get(key, ())):
            if j in self.used[key]:
                continue
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best > IOU_THRESHOLD:
            self.used[key].add(best_j)
            return True
        if any(iou(box, g) > IOU_THRESHOLD for g in self.hard.get(key, ())):
            return None
        return False


def _check_classes(class_ids, num_classes: int | None, gts) -> None:
    limit = num_classes if num_classes is not None else max((g.class_id for g in gts), default=-1) + 1
    for c in class_ids:
        if not 0 <= c < limit:
            raise ValueError(f"unknown class_id {c} (expected 0..{limit - 1})")


def corloc(preds, gts: list[GroundTruth], num_classes: int | None = None) -> CorLocResult:
    """Fraction of predicted boxes that hit a same-class object, per class.

    ``preds`` holds ``(image_id, class_id, Box)`` triples (or anything with
    those attributes). Classes with no counted prediction are left out of
    ``per_class`` and of the mean; the mean of nothing is 0.0.
    """
    triples = [p if isinstance(p, tuple) else (p.image_id, p.class_id, p.box) for p in preds]
    _check_classes({c for _, c, _ in triples}, num_classes, gts)
    m = _Matcher(gts)
    hits: dict[int, int] = defaultdict(int)
    seen: dict[int, int] = defaultdict(int)
    for image_id, class_id, box in triples:
        r = m.match(image_id, class_id, box)
        if r is None:
            continue
        seen[class_id] += 1
        hits[class_id] += int(r)
    per_class = {c: hits[c] / seen[c] for c in sorted(seen)}
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return CorLocResult(per_class, mean, {c: (hits[c], seen[c]) for c in sorted(seen)})


def precision_recall(dets: list[Detection], gts: list[GroundTruth], class_id: int) -> tuple[np.ndarray, np.ndarray]:
    npos = sum(1 for g in gts if g.class_id == class_id and not g.difficult)
    mine = [d for d in dets if d.class_id == class_id]
    order = sorted(range(len(mine)), key=lambda i: -mine[i].score)  # sorted() is stable
    m = _Matcher(gts)
    tp, fp = [], []
    for i in order:
        d = mine[i]
        r = m.match(d.image_id, d.class_id, d.box)
        if r is None:
            continue
        tp.append(float(r))
        fp.append(float(not r))
    tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
    rec = tp_c / npos if npos else np.zeros_like(tp_c)
    prec = tp_c / np.maximum(tp_c + fp_c, np.finfo(np.float64).tiny)
    return rec, prec


def average_precision(dets: list[Detection], gts: list[GroundTruth], class_id: int, use_07_metric: bool = True) -> float:
    """VOC average precision for one class.

    ``use_07_metric`` selects the 11-point interpolation (recall 0, 0.1, ...,
    1.0); otherwise the area under the monotone precision envelope is used.
    """
    if not any(g.class_id == class_id and not g.difficult for g in gts):
        return 0.0
    rec, prec = precision_recall(dets, gts, class_id)
    if rec.size == 0:
        return 0.0
    if use_07_metric:
        total = 0.0
        for k in range(11):
            above = prec[rec >= k / 10]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def per_class_ap(dets, gts, num_classes: int, use_07_metric: bool = True) -> dict[int, float]:
    _check_classes({d.class_id for d in dets}, num_classes, gts)
    present = sorted({g.class_id for g in gts if not g.difficult})
    return {c: average_precision(dets, gts, c, use_07_metric) for c in present if c < num_classes}


def mean_ap(dets, gts, num_classes: int, use_07_metric: bool = True) -> float:
    """Mean AP over classes that have at least one non-difficult ground truth."""
    aps = per_class_ap(dets, gts, num_classes, use_07_metric)
    return float(np.mean(list(aps.values()))) if aps else 0.0


# -- reports -----------------------------------------------------------------


def report_rows(cl: CorLocResult | None = None, aps: dict[int, float] | None = None) -> list[tuple[str, str, str]]:
    """``(metric, class, value)`` rows; the class column is ``mean`` for summaries."""
    rows = []
    if cl is not None:
        rows += [("corloc", str(c), f"{v:.6f}") for c, v in cl.per_class.items()]
        rows.append(("corloc", "mean", f"{cl.mean:.6f}"))
    if aps is not None:
        rows += [("ap", str(c), f"{v:.6f}") for c, v in aps.items()]
        mean = float(np.mean(list(aps.values()))) if aps else 0.0
        rows.append(("map", "mean", f"{mean:.6f}"))
    return rows


def format_report(cl: CorLocResult | None = None, aps: dict[int, float] | None = None) -> str:
    lines = []
    if cl is not None:
        lines.append("[corloc]")
        for c, v in cl.per_class.items():
            hit, n = cl.counts[c]
            lines.append(f"class {c}: {v:.4f} ({hit}/{n})")
    if aps is not None:
        lines.append("[average precision]")
        lines += [f"class {c}: {v:.4f}" for c, v in aps.items()]
    lines.append("[summary]")
    if cl is not None:
        lines.append(f"corloc: {cl.mean:.4f}")
    if aps is not None:
        lines.append(f"map: {float(np.mean(list(aps.values()))) if aps else 0.0:.4f}")
    return "\n".join(lines) + "\n"


def write_report(prefix, cl: CorLocResult | None = None, aps: dict[int, float] | None = None) -> None:
    """Write ``<prefix>.txt`` (human readable) and ``<prefix>.csv`` (metric,class,value)."""
    from pathlib import Path

    prefix = Path(prefix)
    prefix.with_suffix(".txt").write_text(format_report(cl, aps))
    write_table(prefix.with_suffix(".csv"), ("metric", "class", "value"), report_rows(cl, aps))


# -- CSV ---------------------------------------------------------------------


def _box(path, line, row) -> Box:
    coords = [parse_float(path, line, row[k], k) for k in ("x1", "y1", "x2", "y2")]
    try:
        return Box(*coords)
    except ValueError as e:
        raise ParseError(path, line, str(e)) from None


def load_ground_truth(path) -> list[GroundTruth]:
    out = []
    for line, row in read_table(path, GT_HEADER[:-1], optional=GT_HEADER[-1:]):
        out.append(
            GroundTruth(
                row["image_id"],
                parse_int(path, line, row["class_id"], "class_id"),
                _box(path, line, row),
                parse_bool(path, line, row.get("difficult", "0"), "difficult"),
            )
        )
    return out


def save_ground_truth(path, gts: list[GroundTruth]) -> None:
    write_table(path, GT_HEADER, ([g.image_id, g.class_id, *(fmt(v) for v in g.box.as_tuple()), int(g.difficult)] for g in gts))


def load_detections(path) -> list[Detection]:
    return [
        Detection(row["image_id"], parse_int(path, line, row["class_id"], "class_id"), _box(path, line, row), parse_float(path, line, row["score"], "score"))
        for line, row in read_table(path, DET_HEADER)
    ]


def save_detections(path, dets: list[Detection]) -> None:
    write_table(path, DET_HEADER, ([d.image_id, d.class_id, *(fmt(v) for v in d.box.as_tuple()), repr(d.score)] for d in dets))
