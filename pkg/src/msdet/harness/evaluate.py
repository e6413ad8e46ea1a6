"""COCO-style average precision (101-point interpolation, no NMS)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..matchloss.geometry import box_iou_np

IOU_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Detections:
    """Detections of one image: ``labels`` ``[n]``, ``scores`` ``[n]``, ``boxes`` ``[n, 4]``."""

    labels: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray

    @classmethod
    def from_probs(cls, probs: np.ndarray, boxes: np.ndarray) -> "Detections":
        """Confidence = max class probability, label = its argmax (lowest index on ties)."""
        probs = np.asarray(probs)
        return cls(probs.argmax(-1), probs.max(-1), np.asarray(boxes, dtype=np.float64))

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 4)))


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    ap: float
    per_class: dict
    num_detections: int
    num_gt: int
    extra: dict = field(default_factory=dict)

    def lines(self) -> list:
        out = [f"ap50 = {self.ap50!r}", f"ap75 = {self.ap75!r}", f"ap = {self.ap!r}",
               f"detections = {self.num_detections}", f"ground_truth = {self.num_gt}"]
        out += [f"class.{k}.ap = {v!r}" for k, v in sorted(self.per_class.items())]
        out += [f"{k} = {v!r}" for k, v in sorted(self.extra.items())]
        return out

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def _match_class(dets, gts, cls, thr):
    """Greedy matching of one class at one IoU threshold.

    Returns ``(scores, is_tp, n_gt)`` over all images, detections sorted by
    descending score (stable across images in image order).
    """
    scores, tps, n_gt = [], [], 0
    for det, gt in zip(dets, gts):
        g_boxes = gt.boxes[gt.labels == cls]
        n_gt += len(g_boxes)
        sel = det.labels == cls
        d_boxes, d_scores = det.boxes[sel], det.scores[sel]
        order = np.argsort(-d_scores, kind="stable")
        d_boxes, d_scores = d_boxes[order], d_scores[order]
        taken = np.zeros(len(g_boxes), dtype=bool)
        iou = box_iou_np(d_boxes, g_boxes) if len(g_boxes) and len(d_boxes) else np.zeros((len(d_boxes), 0))
        for i in range(len(d_boxes)):
            best, best_j = -1.0, -1
            for j in range(len(g_boxes)):
                if not taken[j] and iou[i, j] >= thr and iou[i, j] > best:
                    best, best_j = iou[i, j], j
            if best_j >= 0:
                taken[best_j] = True
            tps.append(best_j >= 0)
            scores.append(d_scores[i])
    return np.asarray(scores, dtype=np.float64), np.asarray(tps, dtype=bool), n_gt


def interpolated_ap(scores, tps, n_gt) -> float:
    """101-point interpolated AP from scored true/false positives."""
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = [envelope[i] if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(vals) / len(RECALL_POINTS)


def average_precision(dets, gts, num_classes: int, thresholds=IOU_THRESHOLDS) -> np.ndarray:
    """``[len(thresholds), num_classes]`` AP table (NaN for classes without ground truth)."""
    table = np.full((len(thresholds), num_classes), np.nan)
    for t, thr in enumerate(thresholds):
        for c in range(num_classes):
            table[t, c] = interpolated_ap(*_match_class(dets, gts, c, thr))
    return table


def _nanmean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else 0.0


def evaluate(dets, gts, num_classes: int) -> EvalReport:
    """AP50, AP75 and AP over IoU 0.50:0.95:0.05, averaged over classes with ground truth."""
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection sets for {len(gts)} images")
    table = average_precision(dets, gts, num_classes)
    per_class_ap = [_nanmean(table[:, c]) if not np.isnan(table[0, c]) else float("nan")
                    for c in range(num_classes)]
    return EvalReport(
        ap50=_nanmean(table[0]),
        ap75=_nanmean(table[5]),
        ap=_nanmean([_nanmean(table[t]) for t in range(len(IOU_THRESHOLDS))]
                    if not np.isnan(table[0]).all() else []),
        per_class={c: v for c, v in enumerate(per_class_ap) if not math.isnan(v)},
        num_detections=int(sum(len(d.scores) for d in dets)),
        num_gt=int(sum(len(g) for g in gts)),
    )
