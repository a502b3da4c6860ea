"""Set-prediction supervision: mask losses, matching cost, optimal assignment.

Predicted multi-view masks are flattened view-major into one long sequence,
making the mask losses identical in form to point-cloud mask losses. The
composite matching cost combines classification probability, BCE + Dice, and
the optional attention-alignment block; assignment is the minimum-cost
one-to-one matching with a deterministic lexicographic tie rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor

_TIE_TOL = 1e-9


class CapacityError(ValueError):
    """Fewer queries than ground-truth instances."""


class DegenerateSupervisionError(ValueError):
    """No valid supervision pixels anywhere."""


@dataclass
class LossWeights:
    camera: float = 5.0
    depth: float = 1.0
    cls: float = 0.5
    mask: float = 1.0
    js: float = 0.5


@dataclass
class CostMatrix:
    """Total pairwise cost plus the retained component breakdown."""

    total: np.ndarray  # (O, G)
    cls: np.ndarray  # (O, G) probability of the target class
    bce: np.ndarray
    dice: np.ndarray
    js: np.ndarray | None  # absent when alignment costs are disabled
    weights: LossWeights


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query j, ground truth k), ascending in j
    total_cost: float


# ---------------------------------------------------------------------------
# Mask flattening and losses
# ---------------------------------------------------------------------------


def flatten_masks(masks) -> Tensor:
    """(N, h, w) per-view masks -> one view-major, row-major flat sequence."""
    masks = ad.as_tensor(masks)
    return ad.reshape(masks, (masks.size,))


def unflatten_masks(flat, n_views: int, h: int, w: int):
    flat = ad.as_tensor(flat)
    if flat.size != n_views * h * w:
        raise ValueError(f"cannot unflatten length {flat.size} into ({n_views}, {h}, {w})")
    return ad.reshape(flat, (n_views, h, w))


def bce(m, gt) -> Tensor:
    """Mean binary cross-entropy with floored logs; inputs of equal length."""
    m, gt = ad.as_tensor(m), ad.as_tensor(gt)
    if m.shape != gt.shape:
        raise ValueError(f"length mismatch: {m.shape} vs {gt.shape}")
    losses = -(gt * ad.log(m) + (1.0 - gt) * ad.log(1.0 - m))
    return losses.mean()


def dice(m, gt) -> Tensor:
    """Dice loss with Laplace smoothing: 1 - (2*overlap + 1)/(sums + 1)."""
    m, gt = ad.as_tensor(m), ad.as_tensor(gt)
    if m.shape != gt.shape:
        raise ValueError(f"length mismatch: {m.shape} vs {gt.shape}")
    overlap = (m * gt).sum()
    return 1.0 - (overlap * 2.0 + 1.0) / (m.sum() + gt.sum() + 1.0)


def _bce_pairwise(probs: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(O, P) probabilities x (G, P) binary targets -> (O, G) mean BCE."""
    log_p = np.log(np.maximum(probs, LOG_FLOOR))
    log_1p = np.log(np.maximum(1.0 - probs, LOG_FLOOR))
    length = probs.shape[1]
    return -(log_p @ gts.T + log_1p @ (1.0 - gts).T) / length


def _dice_pairwise(probs: np.ndarray, gts: np.ndarray) -> np.ndarray:
    overlap = probs @ gts.T
    return 1.0 - (2.0 * overlap + 1.0) / (
        probs.sum(axis=1)[:, None] + gts.sum(axis=1)[None, :] + 1.0
    )


# ---------------------------------------------------------------------------
# Matching cost and Hungarian assignment
# ---------------------------------------------------------------------------


def match_cost(
    class_probs: np.ndarray,
    mask_probs: np.ndarray,
    gt_classes: np.ndarray,
    gt_masks: np.ndarray,
    weights: LossWeights,
    js_block=None,
) -> CostMatrix:
    """Pairwise cost -w_cls * p(class) + w_mask * (BCE + Dice) [+ w_js * JS].

    class_probs: (O, C+1) softmax probabilities; mask_probs: (O, P) flattened
    probabilities; gt_masks: (G, P) binary; js_block: AlignmentCostBlock or
    None when alignment costs are disabled.
    """
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if gt_classes.size and (
        gt_classes.min() < 0 or gt_classes.max() >= class_probs.shape[1] - 1
    ):
        raise ValueError(
            f"ground-truth class out of range [0, {class_probs.shape[1] - 1})"
        )
    cls = class_probs[:, gt_classes] if gt_classes.size else np.zeros((class_probs.shape[0], 0))
    bce_m = _bce_pairwise(mask_probs, gt_masks)
    dice_m = _dice_pairwise(mask_probs, gt_masks)
    total = -weights.cls * cls + weights.mask * (bce_m + dice_m)
    js = None
    if js_block is not None:
        js = js_block.costs
        total = total + weights.js * js
    return CostMatrix(total=total, cls=cls, bce=bce_m, dice=dice_m, js=js, weights=weights)


def _optimal_cost(costs: np.ndarray) -> float:
    if costs.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(costs)
    return float(costs[rows, cols].sum())


def hungarian(cost: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-cost assignment of every ground truth to a distinct query.

    Ties are broken toward the lexicographically smallest (j, k) pair
    sequence: pairs are fixed in ascending query order, each taking the
    smallest target that still permits an optimal completion.
    """
    costs = cost.total if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    n_q, n_g = costs.shape
    if n_q < n_g:
        raise CapacityError(f"{n_q} queries cannot cover {n_g} ground truths")
    if not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix contains non-finite entries")
    if n_g == 0:
        return Assignment(pairs=[], total_cost=0.0)

    optimum = _optimal_cost(costs)
    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    free_g = list(range(n_g))
    j_start = 0
    for position in range(n_g):
        remaining = n_g - position - 1
        chosen = None
        for j in range(j_start, n_q - remaining):
            for k in free_g:  # ascending: free_g stays sorted
                if remaining:
                    rows = list(range(j + 1, n_q))
                    cols = [g for g in free_g if g != k]
                    rest = _optimal_cost(costs[np.ix_(rows, cols)])
                else:
                    rest = 0.0
                if abs(fixed + costs[j, k] + rest - optimum) <= _TIE_TOL:
                    chosen = (j, k)
                    break
            if chosen is not None:
                break
        if chosen is None:  # numerical guard: fall back to the raw solver order
            rows, cols = linear_sum_assignment(costs)
            pairs = sorted(zip(rows.tolist(), cols.tolist()))
            break
        pairs.append(chosen)
        fixed += costs[chosen]
        free_g.remove(chosen[1])
        j_start = chosen[0] + 1
    total = float(sum(costs[j, k] for j, k in pairs))
    return Assignment(pairs=pairs, total_cost=total)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def instance_loss(
    assignment: Assignment,
    class_logits: Tensor,
    flat_mask_probs: Tensor,
    gt_classes: np.ndarray,
    gt_flat_masks: np.ndarray,
    weights: LossWeights,
    no_object_weight: float = 0.1,
) -> tuple[Tensor, dict]:
    """Classification over all queries plus mask losses over matched pairs.

    Unmatched queries target the no-object class with a down-weighted
    cross-entropy (weighted mean). Returns the scalar loss and a component
    breakdown for logging.
    """
    n_q, n_cls = class_logits.shape
    no_object = n_cls - 1
    targets = np.full(n_q, no_object, dtype=np.int64)
    query_weights = np.full(n_q, no_object_weight)
    for j, k in assignment.pairs:
        targets[j] = gt_classes[k]
        query_weights[j] = 1.0

    log_probs = ad.log_softmax_lastdim(class_logits)
    onehot = np.zeros((n_q, n_cls))
    onehot[np.arange(n_q), targets] = 1.0
    picked = (log_probs * Tensor(onehot)).sum(axis=1)
    cls_loss = -(picked * Tensor(query_weights)).sum() / float(query_weights.sum())

    if assignment.pairs:
        q_idx = [j for j, _ in assignment.pairs]
        g_idx = [k for _, k in assignment.pairs]
        m = ad.take_rows(flat_mask_probs, q_idx)  # (M, P)
        gt = Tensor(np.asarray(gt_flat_masks, dtype=np.float64)[g_idx])
        bce_loss = (-(gt * ad.log(m) + (1.0 - gt) * ad.log(1.0 - m))).mean()
        overlap = (m * gt).sum(axis=1)
        dice_rows = 1.0 - (overlap * 2.0 + 1.0) / (m.sum(axis=1) + gt.sum(axis=1) + 1.0)
        dice_loss = dice_rows.mean()
    else:
        bce_loss = Tensor(0.0)
        dice_loss = Tensor(0.0)

    loss = weights.cls * cls_loss + weights.mask * (bce_loss + dice_loss)
    parts = {
        "cls": float(cls_loss.data),
        "bce": float(bce_loss.data),
        "dice": float(dice_loss.data),
    }
    return loss, parts


def geometry_loss(
    pred_cameras: Tensor,
    pred_depths: Tensor,
    gt_cameras: np.ndarray,
    gt_depths: np.ndarray,
    weights: LossWeights,
    huber_delta: float = 0.1,
) -> tuple[Tensor, dict]:
    """Huber on the 9-vector cameras (quaternion sign-aligned) plus log-L1
    depth over valid pixels (-1 marks invalid)."""
    gt_cameras = np.asarray(gt_cameras, dtype=np.float64).copy()
    signs = np.sign((pred_cameras.data[:, :4] * gt_cameras[:, :4]).sum(axis=1))
    signs[signs == 0] = 1.0
    gt_cameras[:, :4] *= signs[:, None]
    camera_term = ad.huber(pred_cameras - Tensor(gt_cameras), huber_delta).mean()

    gt_depths = np.asarray(gt_depths, dtype=np.float64)
    valid = gt_depths > 0.0
    count = int(valid.sum())
    if count == 0:
        raise DegenerateSupervisionError("no valid depth pixels in any view")
    log_gt = np.where(valid, np.log(np.maximum(gt_depths, LOG_FLOOR)), 0.0)
    diff = ad.absolute(ad.log(pred_depths) - Tensor(log_gt)) * Tensor(valid.astype(np.float64))
    depth_term = diff.sum() / count

    loss = weights.camera * camera_term + weights.depth * depth_term
    return loss, {"camera": float(camera_term.data), "depth": float(depth_term.data)}


def total_loss(geometry: Tensor, instance: Tensor, alignment: Tensor, weights: LossWeights) -> Tensor:
    """Training objective: geometry + instance + js-weighted alignment."""
    return geometry + instance + weights.js * alignment
