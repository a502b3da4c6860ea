"""Frame-level attention alignment supervision.

Query cross-attention rows are marginalized into per-frame distributions and
aligned with each instance's area-proportional visibility distribution via
Jensen-Shannon divergence. The divergence feeds the matching cost (one entry
per query/instance pair, averaged over layers and normalized by the frame
count) and, on matched pairs, a training loss. Natural logarithm throughout,
so JS is bounded by ln 2.

Every public function bumps an instrumentation counter; the inference path
is required to leave all counters untouched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor

_COUNTERS = {"marginalize": 0, "js_divergence": 0, "cost_matrix": 0, "alignment_loss": 0}


def counters() -> dict[str, int]:
    return dict(_COUNTERS)


def reset_counters():
    for key in _COUNTERS:
        _COUNTERS[key] = 0


class PartitionError(ValueError):
    """View boundaries do not partition the token sequence."""


class EmptyMatchWarning(UserWarning):
    """Alignment loss requested for a scene with no supervisable matches."""


@dataclass
class AlignmentCostBlock:
    """O x G matrix of layer-averaged, frame-normalized JS costs."""

    costs: np.ndarray  # (O, G), entries in [0, ln 2 / N]
    layers: int
    frames: int


def _check_boundaries(boundaries, total: int):
    expect = 0
    for start, end in boundaries:
        if start != expect or end <= start:
            raise PartitionError(
                f"boundaries {list(boundaries)} do not partition [0, {total})"
            )
        expect = end
    if expect != total:
        raise PartitionError(f"boundaries cover [0, {expect}) but sequence has {total} tokens")


def marginalize_frames(row: np.ndarray, boundaries) -> np.ndarray:
    """Sum token-level attention over each view's slice.

    row: (S,) or (..., S) probability vector(s) over all tokens. Returns the
    per-frame distribution(s) (..., N); total mass is preserved exactly up to
    summation order.
    """
    row = np.asarray(row, dtype=np.float64)
    _check_boundaries(boundaries, row.shape[-1])
    _COUNTERS["marginalize"] += 1
    return np.stack([row[..., s:e].sum(axis=-1) for s, e in boundaries], axis=-1)


def marginalize_frames_tensor(attn: Tensor, boundaries) -> Tensor:
    """Taped variant: (O, S) attention rows -> (O, N) frame distributions."""
    _check_boundaries(boundaries, attn.shape[-1])
    _COUNTERS["marginalize"] += 1
    parts = [ad.narrow(attn, 1, s, e - s).sum(axis=1, keepdims=True) for s, e in boundaries]
    return ad.concat(parts, axis=1)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """JS(p || q) with natural log and the 0 log 0 = 0 convention.

    Both inputs must be nonnegative and sum to 1 within 1e-6; they are
    renormalized to unit mass before evaluation. Result lies in [0, ln 2].
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be nonnegative")
    sp, sq = p.sum(), q.sum()
    if abs(sp - 1.0) > 1e-6 or abs(sq - 1.0) > 1e-6:
        raise ValueError(f"inputs must sum to 1 within 1e-6, got {sp} and {sq}")
    _COUNTERS["js_divergence"] += 1
    return float(_js_rows(p / sp, q / sq))


def _js_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorized JS over the last axis; inputs already normalized."""
    m = 0.5 * (p + q)
    log_m = np.log(np.maximum(m, LOG_FLOOR))
    kl_p = p * (np.log(np.maximum(p, LOG_FLOOR)) - log_m)
    kl_q = q * (np.log(np.maximum(q, LOG_FLOOR)) - log_m)
    return 0.5 * (kl_p.sum(axis=-1) + kl_q.sum(axis=-1))


def alignment_cost_matrix(marginals: np.ndarray, targets: np.ndarray) -> AlignmentCostBlock:
    """Layer-averaged JS cost between every query and every target instance.

    marginals: (L, O, N) per-layer frame distributions of each query.
    targets: (G, N) area-proportional visibility distributions.
    Entry (j, k) is mean over layers of JS(target_k || marginal_j) / N.
    """
    marginals = np.asarray(marginals, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if marginals.ndim != 3:
        raise ValueError(f"expected (L, O, N) marginals, got shape {marginals.shape}")
    layers, _, frames = marginals.shape
    _COUNTERS["cost_matrix"] += 1
    _COUNTERS["js_divergence"] += layers * marginals.shape[1] * targets.shape[0]
    js = _js_rows(targets[None, None, :, :], marginals[:, :, None, :])  # (L, O, G)
    return AlignmentCostBlock(costs=js.mean(axis=0) / frames, layers=layers, frames=frames)


def alignment_loss(
    matches: list[tuple[int, int]],
    attention_layers: list[Tensor],
    targets: np.ndarray,
    boundaries,
) -> Tensor:
    """Taped alignment loss over matched (query, instance) pairs.

    Mean over matches of the per-layer JS sum, divided by layers * frames;
    equal to the mean of the matched cost-block entries. Returns 0 (with an
    EmptyMatchWarning) when there are no matches.
    """
    _COUNTERS["alignment_loss"] += 1
    if not matches:
        warnings.warn("no matched pairs; alignment loss is 0", EmptyMatchWarning)
        return Tensor(0.0)
    targets = np.asarray(targets, dtype=np.float64)
    layers = len(attention_layers)
    frames = targets.shape[1]
    query_idx = [j for j, _ in matches]
    target_rows = np.concatenate([targets[[k for _, k in matches]]] * layers, axis=0)

    per_layer = [
        ad.take_rows(marginalize_frames_tensor(attn, boundaries), query_idx)
        for attn in attention_layers
    ]
    q = ad.concat(per_layer, axis=0)  # (L*M, N)
    _COUNTERS["js_divergence"] += q.shape[0]

    p = Tensor(target_rows)
    m = (p + q) * 0.5
    log_m = ad.log(m)
    kl_p = (p * (ad.log(p) - log_m)).sum(axis=1)
    kl_q = (q * (ad.log(q) - log_m)).sum(axis=1)
    js = (kl_p + kl_q) * 0.5  # (L*M,)
    return js.sum() / (len(matches) * layers * frames)
