"""From per-view predictions to labeled 3D points.

Masks are binarized, depth maps unprojected through their cameras into one
world frame, and per-instance point clouds assembled with score-based
conflict resolution. Also implements the evaluation-side mapping protocol:
ground-truth points are projected into every view, visibility-tested against
the ground-truth depth, and labeled by majority vote over their visible
projections, optionally smoothed over superpoint segments.

Prediction interchange file ("SVPR"): magic, instance count, then per
instance class (LE i32), score (LE f8), point count (LE u32) and xyz
triples (LE f8).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes.camera import CameraParams, project, unproject_pixels

PRED_MAGIC = b"SVPR"
DEFAULT_VISIBILITY_EPS = 1e-3


class PredictionFileError(ValueError):
    """Malformed prediction interchange file."""


@dataclass
class PointCloudSeg:
    """World-frame points with per-point instance labels.

    labels index into the instance arrays (classes/scores); -1 is unassigned.
    """

    points: np.ndarray  # (P, 3)
    labels: np.ndarray  # (P,) int64
    classes: np.ndarray  # (M,) per-instance class index
    scores: np.ndarray  # (M,) per-instance confidence in [0, 1]


def binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Strictly-greater thresholding of probability masks."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"mask threshold must lie in (0, 1), got {threshold}")
    return np.asarray(probs) > threshold


def upsample_nearest(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Nearest-neighbor upsampling of the trailing two axes."""
    return mask.repeat(factor, axis=-2).repeat(factor, axis=-1)


def unproject_depth_map(depth: np.ndarray, camera: CameraParams):
    """World points of all valid pixels plus their (v, u) indices.

    Pixels with non-positive depth (the -1 sentinel) are skipped.
    """
    h, w = depth.shape
    vs, us = np.nonzero(depth > 0)
    points = unproject_pixels(us, vs, depth[vs, us], camera, h, w)
    return points, (vs, us)


def score(class_probs: np.ndarray, mask_probs: np.ndarray, threshold: float) -> float:
    """Confidence: best non-background class probability times the mean mask
    probability over pixels above the threshold (0 if none)."""
    best_class = float(np.max(class_probs[:-1]))
    above = mask_probs[mask_probs > threshold]
    if above.size == 0:
        return 0.0
    return best_class * float(above.mean())


def assemble_instances(
    masks: np.ndarray,
    depths: np.ndarray,
    cameras: list[CameraParams],
    classes: np.ndarray,
    scores: np.ndarray,
) -> PointCloudSeg:
    """Union of unprojected in-mask pixels per instance, in one world frame.

    masks: (M, N, h, w) binary; when (h, w) is half the depth resolution the
    masks are upsampled by nearest neighbor first. Pixels claimed by several
    instances go to the higher score (ties to the lower index).
    """
    masks = np.asarray(masks, dtype=bool)
    depths = np.asarray(depths, dtype=np.float64)
    n_inst = masks.shape[0]
    n_views, height, width = depths.shape
    if masks.shape[2:] == (height // 2, width // 2):
        masks = upsample_nearest(masks)
    if masks.shape[1:] != (n_views, height, width):
        raise ValueError(f"mask shape {masks.shape} incompatible with depths {depths.shape}")

    # ascending (score, -index): later overwrites win the conflict rule
    order = sorted(range(n_inst), key=lambda m: (scores[m], -m))
    winner = np.full((n_views, height, width), -1, dtype=np.int64)
    for m in order:
        winner[masks[m] & (depths > 0)] = m

    all_points, all_labels = [], []
    for i, cam in enumerate(cameras):
        vs, us = np.nonzero(winner[i] >= 0)
        if vs.size == 0:
            continue
        all_points.append(unproject_pixels(us, vs, depths[i, vs, us], cam, height, width))
        all_labels.append(winner[i, vs, us])
    points = np.concatenate(all_points) if all_points else np.zeros((0, 3))
    labels = np.concatenate(all_labels) if all_labels else np.zeros(0, dtype=np.int64)
    return PointCloudSeg(
        points=points,
        labels=labels,
        classes=np.asarray(classes, dtype=np.int64),
        scores=np.asarray(scores, dtype=np.float64),
    )


def map_to_reference(
    gt_points: np.ndarray,
    masks: np.ndarray,
    gt_cameras: list[CameraParams],
    gt_depths: np.ndarray,
    visibility_eps: float = DEFAULT_VISIBILITY_EPS,
    scores: np.ndarray | None = None,
):
    """Label every ground-truth point by its visible mask projections.

    A point is visible in a view when it projects inside the image and its
    camera depth matches the ground-truth depth within visibility_eps. The
    point takes the label whose mask contains a strict majority of its
    visible projections; several eligible labels resolve to the higher score
    (then lower index). Returns (labels, n_points_visible_nowhere).
    """
    masks = np.asarray(masks, dtype=bool)
    gt_depths = np.asarray(gt_depths, dtype=np.float64)
    n_inst = masks.shape[0]
    n_views, height, width = gt_depths.shape
    n_points = gt_points.shape[0]

    votes = np.zeros((n_inst, n_points), dtype=np.int64)
    visible_counts = np.zeros(n_points, dtype=np.int64)
    for i, cam in enumerate(gt_cameras):
        u, v, z = project(gt_points, cam, height, width)
        pu = np.floor(u).astype(np.int64)
        pv = np.floor(v).astype(np.int64)
        inside = (z > 0) & (pu >= 0) & (pu < width) & (pv >= 0) & (pv < height)
        pu_c, pv_c = np.clip(pu, 0, width - 1), np.clip(pv, 0, height - 1)
        d = gt_depths[i, pv_c, pu_c]
        visible = inside & (d > 0) & (np.abs(z - d) < visibility_eps)
        visible_counts += visible
        for m in range(n_inst):
            votes[m] += visible & masks[m, i, pv_c, pu_c]

    labels = np.full(n_points, -1, dtype=np.int64)
    majority = votes > (visible_counts / 2.0)  # strict majority of visible views
    eligible = majority & (visible_counts > 0)
    if scores is None:
        scores = np.zeros(n_inst)
    # higher score wins; ties to the lower instance index
    rank = sorted(range(n_inst), key=lambda m: (scores[m], -m))
    for m in rank:
        labels[eligible[m]] = m
    return labels, int((visible_counts == 0).sum())


def superpoint_vote(labels: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Assign each segment's most frequent label (including -1) to all its
    points; ties break toward the smaller label id."""
    labels = np.asarray(labels, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    if labels.shape != segments.shape:
        raise ValueError("labels and segments must align")
    out = labels.copy()
    for seg in np.unique(segments):
        member = segments == seg
        values, counts = np.unique(labels[member], return_counts=True)
        out[member] = values[np.argmax(counts)]  # np.unique sorts: ties pick smaller
    return out


# ---------------------------------------------------------------------------
# Prediction interchange file
# ---------------------------------------------------------------------------


def write_predictions(path, instances: list[tuple[int, float, np.ndarray]]):
    """instances: (class_index, score, points (P, 3)) per predicted instance."""
    with open(Path(path), "wb") as f:
        f.write(PRED_MAGIC)
        f.write(struct.pack("<I", len(instances)))
        for class_index, inst_score, points in instances:
            points = np.asarray(points, dtype=np.float64)
            f.write(struct.pack("<id", int(class_index), float(inst_score)))
            f.write(struct.pack("<I", points.shape[0]))
            f.write(points.astype("<f8").tobytes())


def read_predictions(path) -> list[tuple[int, float, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != PRED_MAGIC:
        raise PredictionFileError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise PredictionFileError(f"{path}: truncated at offset {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        class_index, inst_score = struct.unpack("<id", take(12))
        (n_points,) = struct.unpack("<I", take(4))
        pts = np.frombuffer(take(24 * n_points), dtype="<f8").reshape(n_points, 3).copy()
        out.append((class_index, inst_score, pts))
    if pos != len(raw):
        raise PredictionFileError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def segmentation_to_instances(seg: PointCloudSeg) -> list[tuple[int, float, np.ndarray]]:
    """PointCloudSeg -> interchange records, one per instance with points."""
    out = []
    for m in range(len(seg.classes)):
        pts = seg.points[seg.labels == m]
        out.append((int(seg.classes[m]), float(seg.scores[m]), pts))
    return out
