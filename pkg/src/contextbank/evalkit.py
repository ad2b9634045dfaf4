"""Detection metrics: IoU, PASCAL-style mAP, AR@1, false-positive histograms.

Detections and ground truth can be read from / written to a line format::

    # detections: frame_id class score x_center y_center width height
    # ground truth: frame_id class x_center y_center width height

Blank lines and lines starting with ``#`` are ignored.  Boxes are in pixels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .encoding import BoxPx


class EvalInputError(ValueError):
    pass


def iou(a: BoxPx, b: BoxPx) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class Det:
    frame_id: int
    class_id: int
    score: float
    box: BoxPx


@dataclass(frozen=True)
class GroundTruth:
    frame_id: int
    class_id: int
    box: BoxPx
    ignore: bool = False


@dataclass
class EvalReport:
    map50: float
    ar1: float
    per_class_ap: Dict[int, float]
    n_detections: int
    n_ground_truth: int
    per_class_gt: Dict[int, int]
    fp_histogram: List[int] = field(default_factory=list)
    fp_bins: List[float] = field(default_factory=list)
    iou_threshold: float = 0.5
    config: Dict[str, object] = field(default_factory=dict)
    map_coco: Optional[float] = None

    def to_json(self) -> str:
        doc = asdict(self)
        doc["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        doc["per_class_gt"] = {str(k): v for k, v in self.per_class_gt.items()}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def rank_key(d: Det):
    """Total order used everywhere: score desc, then frame id, then box geometry."""
    b = d.box
    return (-d.score, d.frame_id, b.x_center, b.y_center, b.width, b.height, d.class_id)


def match_detections(dets: Sequence[Det], gts: Sequence[GroundTruth], iou_threshold: float = 0.5):
    """Greedy PASCAL matching for a single class.

    Returns ``(order, tp_flags)`` where ``order`` is the list of detections in
    evaluation order.  Each detection takes the unmatched ground truth box with
    the highest IoU (ties: lowest ground-truth index) if that IoU clears the
    threshold.
    """
    by_frame: Dict[int, List[Tuple[int, GroundTruth]]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_frame[g.frame_id].append((j, g))
    taken = set()
    order = sorted(dets, key=rank_key)
    flags = []
    for d in order:
        best, best_iou = None, -1.0
        for j, g in by_frame.get(d.frame_id, ()):
            if j in taken:
                continue
            o = iou(d.box, g.box)
            if o > best_iou:
                best, best_iou = j, o
        if best is not None and best_iou >= iou_threshold:
            taken.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return order, flags


def average_precision(tp_flags: Sequence[bool], n_positive: int) -> float:
    """All-points interpolated AP: area under the monotone precision envelope."""
    if n_positive == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    recall = np.concatenate([[0.0], tp / n_positive, [1.0]])
    precision = np.concatenate([[0.0], tp / np.maximum(ranks, 1.0), [0.0]])
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    # fsum is exactly rounded, so the result does not depend on summation order
    return math.fsum((recall[steps + 1] - recall[steps]) * precision[steps + 1])


def _check_classes(items, classes: Optional[Iterable[int]]):
    if classes is None:
        return
    allowed = set(classes)
    for it in items:
        if it.class_id not in allowed:
            raise EvalInputError(f"class id {it.class_id} (frame {it.frame_id}) not in configured classes")


def evaluate(dets: Sequence[Det], gts: Sequence[GroundTruth], iou_threshold: float = 0.5,
             classes: Optional[Iterable[int]] = None, coco: bool = False) -> EvalReport:
    classes = None if classes is None else sorted(set(classes))
    _check_classes(dets, classes)
    _check_classes(gts, classes)
    gts = [g for g in gts if not g.ignore]
    class_ids = classes if classes is not None else sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    per_class_gt = {c: sum(g.class_id == c for g in gts) for c in class_ids}

    def map_at(thr: float) -> Tuple[float, Dict[int, float]]:
        aps = {}
        for c in class_ids:
            if per_class_gt[c] == 0:
                continue
            _, flags = match_detections([d for d in dets if d.class_id == c],
                                        [g for g in gts if g.class_id == c], thr)
            aps[c] = average_precision(flags, per_class_gt[c])
        return (float(np.mean(list(aps.values()))) if aps else 0.0), aps

    map50, aps = map_at(iou_threshold)
    map_coco = None
    if coco:
        map_coco = float(np.mean([map_at(t)[0] for t in np.linspace(0.5, 0.95, 10)]))
    return EvalReport(
        map50=map50,
        ar1=recall_at_top1(dets, gts, iou_threshold),
        per_class_ap=aps,
        n_detections=len(dets),
        n_ground_truth=len(gts),
        per_class_gt=per_class_gt,
        iou_threshold=iou_threshold,
        map_coco=map_coco,
    )


def recall_at_top1(dets: Sequence[Det], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> float:
    """Class-averaged recall using only each frame's highest-scoring detection."""
    top: Dict[int, Det] = {}
    for d in dets:
        cur = top.get(d.frame_id)
        if cur is None or rank_key(d) < rank_key(cur):
            top[d.frame_id] = d
    return recall(list(top.values()), gts, iou_threshold)


def recall(dets: Sequence[Det], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> float:
    """Class-averaged recall of ``dets`` (classes with ground truth only)."""
    gts = [g for g in gts if not g.ignore]
    classes = sorted({g.class_id for g in gts})
    if not classes:
        return 0.0
    vals = []
    for c in classes:
        cg = [g for g in gts if g.class_id == c]
        _, flags = match_detections([d for d in dets if d.class_id == c], cg, iou_threshold)
        vals.append(sum(flags) / len(cg))
    return float(np.mean(vals))


def false_positive_flags(dets: Sequence[Det], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> List[bool]:
    """Per-detection FP flag (input order): unmatched, duplicate, or wrong class."""
    flags = [True] * len(dets)
    index = {id(d): i for i, d in enumerate(dets)}
    for c in sorted({d.class_id for d in dets}):
        order, tps = match_detections([d for d in dets if d.class_id == c],
                                      [g for g in gts if g.class_id == c and not g.ignore], iou_threshold)
        for d, tp in zip(order, tps):
            if tp:
                flags[index[id(d)]] = False
    return flags


def fp_histogram(dets: Sequence[Det], gts: Sequence[GroundTruth], bins: Sequence[float] = tuple(np.linspace(0, 1, 11)),
                 iou_threshold: float = 0.5) -> np.ndarray:
    """Count false positives per score bin.  ``bins`` are edges partitioning [0, 1]."""
    edges = np.asarray(bins, dtype=np.float64)
    if edges[0] > 0.0 or edges[-1] < 1.0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be increasing edges covering [0, 1]")
    flags = false_positive_flags(dets, gts, iou_threshold)
    scores = np.array([d.score for d, fp in zip(dets, flags) if fp], dtype=np.float64)
    counts, _ = np.histogram(scores, bins=edges)
    return counts


# -- text formats ----------------------------------------------------------------

def _lines(text: str):
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield n, line.split()


def parse_detections(text: str, image_size=(640.0, 480.0)) -> List[Det]:
    out = []
    for n, parts in _lines(text):
        if len(parts) != 7:
            raise EvalInputError(f"line {n}: expected 7 fields, got {len(parts)}")
        try:
            fid, cls, score = int(parts[0]), int(parts[1]), float(parts[2])
            x, y, w, h = (float(v) for v in parts[3:])
        except ValueError as exc:
            raise EvalInputError(f"line {n}: {exc}") from None
        out.append(Det(fid, cls, score, BoxPx(x, y, w, h, *image_size)))
    return out


def parse_ground_truth(text: str, image_size=(640.0, 480.0)) -> List[GroundTruth]:
    out = []
    for n, parts in _lines(text):
        if len(parts) != 6:
            raise EvalInputError(f"line {n}: expected 6 fields, got {len(parts)}")
        try:
            fid, cls = int(parts[0]), int(parts[1])
            x, y, w, h = (float(v) for v in parts[2:])
        except ValueError as exc:
            raise EvalInputError(f"line {n}: {exc}") from None
        out.append(GroundTruth(fid, cls, BoxPx(x, y, w, h, *image_size)))
    return out


def format_detections(dets: Sequence[Det]) -> str:
    rows = ["# frame_id class score x_center y_center width height"]
    rows += [f"{d.frame_id} {d.class_id} {d.score!r} {d.box.x_center!r} {d.box.y_center!r} "
             f"{d.box.width!r} {d.box.height!r}" for d in dets]
    return "\n".join(rows) + "\n"


def format_ground_truth(gts: Sequence[GroundTruth]) -> str:
    rows = ["# frame_id class x_center y_center width height"]
    rows += [f"{g.frame_id} {g.class_id} {g.box.x_center!r} {g.box.y_center!r} {g.box.width!r} {g.box.height!r}"
             for g in gts]
    return "\n".join(rows) + "\n"


def histogram_csv(edges: Sequence[float], counts: Sequence[int], count_name: str = "count") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", count_name])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
    return buf.getvalue()
