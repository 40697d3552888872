"""Evaluation metrics: semantic mIoU, panoptic quality, instance AP.

All functions take plain numpy masks and integer grids so they can be fed
from any prediction source. VOID marks unlabeled ground-truth pixels; those
are excluded from both sides of every IoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ShapeError, ValidationError

VOID = -1


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> tuple[float, dict[int, float]]:
    """Mean IoU over classes present in gt; void gt pixels ignored entirely."""
    if pred.shape != gt.shape:
        raise ShapeError(f"semantic grids differ: {pred.shape} vs {gt.shape}")
    valid = gt != VOID
    per_class: dict[int, float] = {}
    for c in range(n_classes):
        g = gt == c
        if not g.any():
            continue
        p = (pred == c) & valid
        per_class[c] = _iou(p, g)
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class


def _check_segments(segments, side: str):
    claimed = None
    for i, seg in enumerate(segments):
        mask = np.asarray(seg[0])
        if mask.dtype != bool:
            raise ValidationError(f"{side} segment {i} mask must be boolean")
        if claimed is None:
            claimed = np.zeros_like(mask)
        elif claimed.shape != mask.shape:
            raise ShapeError(f"{side} segment {i} shape {mask.shape} differs from others")
        if np.logical_and(claimed, mask).any():
            raise ValidationError(f"{side} segments overlap at segment {i}")
        claimed |= mask


@dataclass
class PanopticCounts:
    """Accumulable TP/FP/FN tallies with the summed IoU of true positives."""

    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "PanopticCounts"):
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def result(self) -> tuple[float, float, float]:
        denom = self.tp + self.fp / 2.0 + self.fn / 2.0
        if denom == 0:
            return 0.0, 0.0, 0.0
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou_sum / denom, sq, rq


def panoptic_counts(pred_segments: list[tuple[np.ndarray, int]],
                    gt_segments: list[tuple[np.ndarray, int]]) -> PanopticCounts:
    """Match same-class segments at IoU > 0.5; strict majority makes it unique."""
    _check_segments(pred_segments, "pred")
    _check_segments(gt_segments, "gt")
    counts = PanopticCounts()
    matched_pred: set[int] = set()
    for gmask, gcls in gt_segments:
        hit = None
        for j, (pmask, pcls) in enumerate(pred_segments):
            if j in matched_pred or pcls != gcls:
                continue
            iou = _iou(pmask, gmask)
            if iou > 0.5:
                hit = (j, iou)
                break
        if hit is None:
            counts.fn += 1
        else:
            matched_pred.add(hit[0])
            counts.tp += 1
            counts.iou_sum += hit[1]
    counts.fp = len(pred_segments) - len(matched_pred)
    return counts


def panoptic_quality(pred_segments: list[tuple[np.ndarray, int]],
                     gt_segments: list[tuple[np.ndarray, int]]) -> tuple[float, float, float]:
    """(PQ, SQ, RQ) for one image; PQ = SQ * RQ by construction."""
    return panoptic_counts(pred_segments, gt_segments).result()


def _class_ap(records: list[tuple[float, bool]], n_gt: int) -> float:
    """Area under the precision envelope for one class's pooled detections."""
    if n_gt == 0:
        raise ValidationError("AP undefined for a class with no ground truth")
    if not records:
        return 0.0
    order = sorted(range(len(records)), key=lambda i: (-records[i][0], i))
    tp = np.cumsum([1.0 if records[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if records[i][1] else 1.0 for i in order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev) * p
        prev = r
    return float(ap)


def match_detections(preds: list[tuple[np.ndarray, int, float]],
                     gts: list[tuple[np.ndarray, int]],
                     threshold: float) -> dict[int, list[tuple[float, bool]]]:
    """Greedy confidence-descending matching for one image.

    Returns per-class (confidence, is_tp) records; each gt is claimed once.
    """
    for _, _, conf in preds:
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"confidence {conf} outside [0, 1]")
    records: dict[int, list[tuple[float, bool]]] = {}
    taken: set[int] = set()
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    for i in order:
        mask, cls, conf = preds[i]
        best, best_iou = None, threshold
        for j, (gmask, gcls) in enumerate(gts):
            if j in taken or gcls != cls:
                continue
            iou = _iou(mask, gmask)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best is not None:
            taken.add(best)
        records.setdefault(cls, []).append((conf, best is not None))
    return records


def average_precision(preds: list[tuple[np.ndarray, int, float]],
                      gts: list[tuple[np.ndarray, int]],
                      thresholds: tuple[float, ...] = (0.5, 0.75)) -> dict[float, float]:
    """Mean AP over gt classes at each IoU threshold, single image."""
    agg = DetectionAggregator(thresholds)
    agg.add(preds, gts)
    return agg.result()


class SemanticIoUAggregator:
    """Dataset-level mIoU: accumulates per-class intersections and unions."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.inter = np.zeros(n_classes, dtype=np.int64)
        self.union = np.zeros(n_classes, dtype=np.int64)
        self.present = np.zeros(n_classes, dtype=bool)

    def add(self, pred: np.ndarray, gt: np.ndarray):
        if pred.shape != gt.shape:
            raise ShapeError(f"semantic grids differ: {pred.shape} vs {gt.shape}")
        valid = gt != VOID
        for c in range(self.n_classes):
            g = gt == c
            if not g.any():
                continue
            p = (pred == c) & valid
            self.present[c] = True
            self.inter[c] += int(np.logical_and(p, g).sum())
            self.union[c] += int(np.logical_or(p, g).sum())

    def result(self) -> tuple[float, dict[int, float]]:
        per_class = {c: float(self.inter[c] / self.union[c])
                     for c in range(self.n_classes) if self.present[c] and self.union[c]}
        if not per_class:
            return 0.0, {}
        return float(np.mean(list(per_class.values()))), per_class


class PanopticAggregator:
    def __init__(self):
        self.counts = PanopticCounts()

    def add(self, pred_segments, gt_segments):
        self.counts.add(panoptic_counts(pred_segments, gt_segments))

    def result(self) -> tuple[float, float, float]:
        return self.counts.result()


class DetectionAggregator:
    """Pools per-image matching records into dataset-level AP per threshold."""

    def __init__(self, thresholds: tuple[float, ...] = (0.5, 0.75)):
        self.thresholds = tuple(thresholds)
        self.records: dict[float, dict[int, list[tuple[float, bool]]]] = \
            {t: {} for t in self.thresholds}
        self.n_gt: dict[int, int] = {}

    def add(self, preds, gts):
        for _, gcls in gts:
            self.n_gt[gcls] = self.n_gt.get(gcls, 0) + 1
        for t in self.thresholds:
            image_records = match_detections(preds, gts, t)
            for cls, recs in image_records.items():
                self.records[t].setdefault(cls, []).extend(recs)

    def result(self) -> dict[float, float]:
        out = {}
        for t in self.thresholds:
            classes = sorted(self.n_gt)
            if not classes:
                out[t] = 0.0
                continue
            aps = [_class_ap(self.records[t].get(c, []), self.n_gt[c]) for c in classes]
            out[t] = float(np.mean(aps))
        return out


@dataclass
class MetricReport:
    """Named scalar metrics plus optional per-class detail, printable as key=value."""

    scalars: dict[str, float] = field(default_factory=dict)
    per_class: dict[str, dict] = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        lines = [f"{k}={v:.6f}" for k, v in sorted(self.scalars.items())]
        for group, values in sorted(self.per_class.items()):
            for key, v in sorted(values.items()):
                lines.append(f"{group}[{key}]={v:.6f}")
        return lines
