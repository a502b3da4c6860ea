"""Instance-segmentation mAP, scale-aligned depth metrics, and attention
concentration diagnostics.

AP follows the ScanNet-style protocol: predictions sorted by descending
score (ties by ascending id), greedily matched to the unmatched same-class
ground truth of highest IoU at or above the threshold, and integrated as the
area under the right-interpolated precision-recall steps. The headline
number averages IoU thresholds 0.50 to 0.95 in steps of 0.05; mAP50/mAP25
sit at the two fixed thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STRICT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class InstanceRecord:
    """One instance as a set of point ids over a shared reference cloud."""

    points: frozenset
    class_index: int
    score: float = 1.0


@dataclass
class ApResult:
    per_class: dict  # class -> {threshold -> ap}
    map_all: float  # mean over classes and thresholds 0.50..0.95
    map_50: float
    map_25: float
    curves: dict = field(default_factory=dict)  # (class, threshold) -> (recall, precision)


def iou_3d(pred_points, gt_points) -> float:
    """Intersection over union of two point-id sets; 0 when both empty."""
    pred_points, gt_points = set(pred_points), set(gt_points)
    union = len(pred_points | gt_points)
    if union == 0:
        return 0.0
    return len(pred_points & gt_points) / union


def average_precision(
    preds: list[InstanceRecord], gts: list[InstanceRecord], iou_threshold: float
):
    """AP for one class: greedy matching then step-integrated PR area.

    Returns (ap, recall_curve, precision_curve).
    """
    n_gt = len(gts)
    if n_gt == 0:
        raise ValueError("average_precision needs at least one ground truth")
    if not preds:
        return 0.0, np.zeros(0), np.zeros(0)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched = [False] * n_gt
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        best_iou, best_k = 0.0, -1
        for k, gt in enumerate(gts):
            if matched[k]:
                continue
            iou = iou_3d(preds[i].points, gt.points)
            if iou > best_iou:
                best_iou, best_k = iou, k
        if best_k >= 0 and best_iou >= iou_threshold:
            matched[best_k] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(order) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / n_gt
    # make precision non-increasing from the right, then sum step areas
    interp = precision.copy()
    for i in range(len(interp) - 2, -1, -1):
        interp[i] = max(interp[i], interp[i + 1])
    prev_recall = 0.0
    ap = 0.0
    for r, p in zip(recall, interp):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap), recall, precision


def map_suite(
    preds: list[InstanceRecord], gts: list[InstanceRecord], class_agnostic: bool = False
) -> ApResult:
    """AP aggregated over classes and IoU thresholds.

    Classes are those present in the ground truth; predictions of absent
    classes are ignored. class_agnostic collapses everything to one class.
    """
    if class_agnostic:
        preds = [InstanceRecord(p.points, 0, p.score) for p in preds]
        gts = [InstanceRecord(g.points, 0, g.score) for g in gts]
    classes = sorted({g.class_index for g in gts})
    thresholds = STRICT_THRESHOLDS + (0.25,)
    per_class: dict = {c: {} for c in classes}
    curves = {}
    for c in classes:
        class_preds = [p for p in preds if p.class_index == c]
        class_gts = [g for g in gts if g.class_index == c]
        for t in thresholds:
            ap, recall, precision = average_precision(class_preds, class_gts, t)
            per_class[c][t] = ap
            curves[(c, t)] = (recall, precision)

    def mean_over_classes(t):
        if not classes:
            return 0.0
        return float(np.mean([per_class[c][t] for c in classes]))

    map_all = float(np.mean([mean_over_classes(t) for t in STRICT_THRESHOLDS])) if classes else 0.0
    return ApResult(
        per_class=per_class,
        map_all=map_all,
        map_50=mean_over_classes(0.50),
        map_25=mean_over_classes(0.25),
        curves=curves,
    )


def depth_metrics(pred_depths, gt_depths) -> tuple[float, float]:
    """(abs_rel, delta_1.25) after aligning with one global median scale.

    Inputs are sequences of depth maps; gt pixels equal to -1 are invalid and
    skipped. Valid ground truth must be strictly positive.
    """
    pred = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in pred_depths])
    gt = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in gt_depths])
    valid = gt != -1.0
    if not valid.any():
        raise ValueError("no valid ground-truth depth pixels")
    gt = gt[valid]
    pred = pred[valid]
    if np.any(gt <= 0.0):
        raise ValueError("valid ground-truth depth must be positive")
    if np.any(pred <= 0.0):
        raise ValueError("predictions must be positive")
    scale = float(np.median(gt / pred))
    aligned = scale * pred
    abs_rel = float(np.mean(np.abs(aligned - gt) / gt))
    ratio = np.maximum(aligned / gt, gt / aligned)
    delta = float(np.mean(ratio < 1.25))
    return abs_rel, delta


def attention_entropy(p) -> float:
    """Shannon entropy (natural log) with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("distribution entries must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"distribution must sum to 1 within 1e-6, got {p.sum()}")
    positive = p[p > 0]
    return float(-(positive * np.log(positive)).sum())
