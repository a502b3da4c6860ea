"""Deterministic training loop, inference, and dataset-level evaluation.

Each step samples one scene and a contiguous window of views, re-expresses
the window's cameras relative to its first view (the gauge), builds the
matching cost according to the alignment mode, matches, and descends the
total objective with AdamW under linear warmup + cosine decay and global
gradient clipping. Everything is a pure function of the config seed.

Alignment modes: "off" computes no alignment quantities at all,
"loss_only" adds the alignment loss on matched pairs, "loss_and_cost" also
adds the alignment block to the matching cost.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attn_align, autodiff as ad, matching, metrics, reconstruct
from .autodiff import Tensor
from .model import Model, ModelConfig, save_checkpoint
from .scenes import SceneData, read_dataset, superpoint_segments
from .scenes.camera import CameraParams, relative_to_reference
from .scenes.render import render_instance_masks

MIN_VISIBLE_PIXELS = 4  # instances below this window total are unsupervised
FADA_MODES = ("off", "loss_only", "loss_and_cost")

TOY_TRAIN_SEED = 0
TOY_EVAL_SEED = 1000
TOY_TRAIN_SCENES = 20
TOY_EVAL_SCENES = 5


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid configuration)."""


@dataclass
class TrainConfig:
    dataset: str
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 3000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    weights: matching.LossWeights = field(default_factory=matching.LossWeights)
    fada_enabled: str = "loss_and_cost"
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.fada_enabled not in FADA_MODES:
            raise ValueError(f"fada_enabled must be one of {FADA_MODES}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("rates and clip must be nonnegative (clip positive)")
        self.model.validate()

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        doc = json.loads(text)
        doc["model"] = ModelConfig(**doc.get("model", {}))
        doc["weights"] = matching.LossWeights(**doc.get("weights", {}))
        return TrainConfig(**doc)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Moment-based adaptive optimizer with decoupled weight decay.

    Decay applies only to matrices (ndim >= 2); gains, biases, and learned
    token vectors are exempt.
    """

    def __init__(self, params: list[Tensor], weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.decay = [p.data.ndim >= 2 for p in params]

    def step(self, lr: float):
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            if decay and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def learning_rate_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    progress = (step - config.warmup_steps) / span
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# Scene bundles: everything the loop needs, precomputed once
# ---------------------------------------------------------------------------


@dataclass
class SceneBundle:
    images: np.ndarray  # (N, H, W, 3)
    depths: np.ndarray  # (N, H, W)
    instance_maps: np.ndarray  # (N, H, W)
    half_masks: np.ndarray  # (N, H/2, W/2) instance ids rendered at half res
    camera_vectors: np.ndarray  # (N, 9) in the scene's own frame
    cameras: list
    instance_ids: np.ndarray  # (I,)
    instance_classes: np.ndarray  # (I,)
    pixel_counts: np.ndarray  # (I, N) full-resolution visibility counts


def bundle_scene(scene: SceneData) -> SceneBundle:
    views = scene.views
    h, w = views[0].depth.shape
    instance_maps = np.stack([v.instance_map for v in views])
    ids = np.array([o.instance_id for o in scene.spec.objects], dtype=np.int64)
    classes = np.array([o.class_index for o in scene.spec.objects], dtype=np.int64)
    counts = np.stack(
        [(instance_maps == k).sum(axis=(1, 2)) for k in ids]
    )  # (I, N)
    half = render_instance_masks(scene.spec, [v.camera for v in views], (h // 2, w // 2))
    return SceneBundle(
        images=np.stack([v.rgb for v in views]),
        depths=np.stack([v.depth for v in views]),
        instance_maps=instance_maps,
        half_masks=half,
        camera_vectors=np.stack([v.camera.as_vector() for v in views]),
        cameras=[v.camera for v in views],
        instance_ids=ids,
        instance_classes=classes,
        pixel_counts=counts,
    )


@dataclass
class WindowTargets:
    """Ground truth for one sampled window of views."""

    images: np.ndarray
    gt_cameras: np.ndarray  # (w, 9) relative to the window's first view
    gt_depths: np.ndarray
    gt_classes: np.ndarray  # (G,)
    gt_flat_masks: np.ndarray  # (G, w * h2 * w2)
    visibility: np.ndarray  # (G, w) area-proportional target distributions
    kept_ids: np.ndarray  # (G,) original instance ids


def window_targets(bundle: SceneBundle, start: int, length: int) -> WindowTargets:
    sl = slice(start, start + length)
    counts = bundle.pixel_counts[:, sl]
    totals = counts.sum(axis=1)
    kept = totals >= MIN_VISIBLE_PIXELS
    visibility = counts[kept] / totals[kept, None]
    half = bundle.half_masks[sl]
    flat = np.stack(
        [(half == k).astype(np.float64).ravel() for k in bundle.instance_ids[kept]]
    ) if kept.any() else np.zeros((0, half.size))
    rel_cams = relative_to_reference(bundle.cameras[sl.start : sl.stop])
    return WindowTargets(
        images=bundle.images[sl],
        gt_cameras=np.stack([c.as_vector() for c in rel_cams]),
        gt_depths=bundle.depths[sl],
        gt_classes=bundle.instance_classes[kept],
        gt_flat_masks=flat,
        visibility=visibility,
        kept_ids=bundle.instance_ids[kept],
    )


# ---------------------------------------------------------------------------
# One optimization step (shared by train() and the gradient-check harness)
# ---------------------------------------------------------------------------


def compute_losses(
    model: Model,
    targets: WindowTargets,
    weights: matching.LossWeights,
    fada_enabled: str,
    fixed_assignment: matching.Assignment | None = None,
):
    """Forward pass and full objective for one window.

    Returns (total, parts, assignment, outputs). With fixed_assignment the
    matching step is skipped (used for finite-difference probing, where the
    piecewise-constant assignment must stay frozen).
    """
    record = fada_enabled != "off"
    outputs = model.forward(targets.images, record_attention=record)
    n_views = targets.images.shape[0]
    boundaries = outputs.view_boundaries

    mask_probs = model.mask_probability(outputs.queries, outputs.features)  # (N, O, hw)
    o = model.config.num_queries
    flat_masks = ad.reshape(ad.permute(mask_probs, (1, 0, 2)), (o, mask_probs.size // o))

    if fixed_assignment is None:
        with ad.no_grad():
            class_probs = ad.softmax_lastdim(Tensor(outputs.class_logits.data)).data
        js_block = None
        if fada_enabled == "loss_and_cost" and len(targets.gt_classes):
            marginals = np.stack(
                [attn_align.marginalize_frames(a.data, boundaries) for a in outputs.attention]
            )
            js_block = attn_align.alignment_cost_matrix(marginals, targets.visibility)
        cost = matching.match_cost(
            class_probs,
            flat_masks.data,
            targets.gt_classes,
            targets.gt_flat_masks,
            weights,
            js_block=js_block,
        )
        assignment = matching.hungarian(cost)
    else:
        assignment = fixed_assignment

    geo, geo_parts = matching.geometry_loss(
        outputs.cameras, outputs.depths, targets.gt_cameras, targets.gt_depths, weights
    )
    inst, inst_parts = matching.instance_loss(
        assignment,
        outputs.class_logits,
        flat_masks,
        targets.gt_classes,
        targets.gt_flat_masks,
        weights,
    )
    if fada_enabled == "off":
        align = Tensor(0.0)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", attn_align.EmptyMatchWarning)
            align = attn_align.alignment_loss(
                assignment.pairs, outputs.attention, targets.visibility, boundaries
            )
    total = matching.total_loss(geo, inst, align, weights)
    parts = {
        "camera": geo_parts["camera"],
        "depth": geo_parts["depth"],
        "cls": inst_parts["cls"],
        "bce": inst_parts["bce"],
        "dice": inst_parts["dice"],
        "js": float(align.data),
        "total": float(total.data),
    }
    return total, parts, assignment, outputs


def sample_window(rng: np.random.Generator, n_scenes: int, n_views: int, min_window: int = 2):
    scene_idx = int(rng.integers(0, n_scenes))
    length = int(rng.integers(min_window, n_views + 1))
    start = int(rng.integers(0, n_views - length + 1))
    return scene_idx, start, length


def train(config: TrainConfig, out_checkpoint=None, log_path=None):
    """Run the full loop; returns (model, log_records). Deterministic in seed."""
    config.validate()
    scenes_data, num_classes = read_dataset(config.dataset)
    if num_classes != config.model.num_classes:
        raise TrainingError(
            f"dataset has {num_classes} classes but the model expects {config.model.num_classes}"
        )
    bundles = [bundle_scene(s) for s in scenes_data]
    model = Model(config.model, seed=config.seed)
    optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    records = []

    for step in range(config.steps):
        t0 = time.perf_counter()
        scene_idx, start, length = sample_window(
            rng, len(bundles), bundles[0].images.shape[0]
        )
        targets = window_targets(bundles[scene_idx], start, length)
        for p in model.parameters():
            p.zero_grad()
        with ad.Tape() as tape:
            total, parts, assignment, _ = compute_losses(
                model, targets, config.weights, config.fada_enabled
            )
        if not math.isfinite(parts["total"]):
            record = {"step": step, "scene": scene_idx, **parts}
            if log_path is not None:
                Path(log_path).write_text(
                    "\n".join(json.dumps(r) for r in records + [record])
                )
            raise TrainingError(f"non-finite loss at step {step}: {parts}")
        ad.backward(total, tape)
        del tape
        grad_norm = clip_gradients(model.parameters(), config.grad_clip)
        lr = learning_rate_at(step, config)
        optimizer.step(lr)
        records.append(
            {
                "step": step,
                "lr": lr,
                "scene": scene_idx,
                "window": [start, length],
                "matches": len(assignment.pairs),
                "grad_norm": grad_norm,
                "wall_time": time.perf_counter() - t0,
                **parts,
            }
        )
        if (
            config.checkpoint_every
            and out_checkpoint is not None
            and (step + 1) % config.checkpoint_every == 0
            and (step + 1) < config.steps
        ):
            save_checkpoint(model, f"{out_checkpoint}.step{step + 1}")

    if out_checkpoint is not None:
        save_checkpoint(model, out_checkpoint)
    if log_path is not None:
        Path(log_path).write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return model, records


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


@dataclass
class InstancePrediction:
    query_index: int
    class_index: int
    class_prob: float
    masks: np.ndarray  # (N, H, W) binary, full resolution
    score: float


def predict_instances(model: Model, outputs, timings: dict | None = None):
    """Binarize masks, drop no-object queries, score the rest."""
    t0 = time.perf_counter()
    cfg = model.config
    with ad.no_grad():
        mask_probs = model.mask_probability(outputs.queries, outputs.features).data
    n_views = mask_probs.shape[0]
    probs_per_query = mask_probs.transpose(1, 0, 2).reshape(
        cfg.num_queries, n_views, cfg.height // 2, cfg.width // 2
    )
    logits = outputs.class_logits.data
    class_probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    class_probs /= class_probs.sum(axis=1, keepdims=True)
    predictions = []
    for j in range(cfg.num_queries):
        best = int(np.argmax(class_probs[j]))
        if best == cfg.num_classes:  # no-object
            continue
        binary = reconstruct.binarize(probs_per_query[j], cfg.mask_threshold)
        predictions.append(
            InstancePrediction(
                query_index=j,
                class_index=best,
                class_prob=float(class_probs[j, best]),
                masks=reconstruct.upsample_nearest(binary),
                score=reconstruct.score(class_probs[j], probs_per_query[j], cfg.mask_threshold),
            )
        )
    if timings is not None:
        timings["assembly"] = timings.get("assembly", 0.0) + time.perf_counter() - t0
    return predictions


def infer(model: Model, images: np.ndarray, timings: dict | None = None):
    """Forward plus reconstruction; no alignment computation, no matching."""
    with ad.no_grad():
        outputs = model.forward(images, record_attention=False, timings=timings)
    predictions = predict_instances(model, outputs, timings=timings)
    t0 = time.perf_counter()
    if predictions:
        masks = np.stack([p.masks for p in predictions])
        classes = np.array([p.class_index for p in predictions])
        scores = np.array([p.score for p in predictions])
    else:
        n, h, w = images.shape[0], model.config.height, model.config.width
        masks = np.zeros((0, n, h, w), dtype=bool)
        classes = np.zeros(0, dtype=np.int64)
        scores = np.zeros(0)
    cameras = [CameraParams.from_vector(g) for g in outputs.cameras.data]
    cloud = reconstruct.assemble_instances(
        masks, outputs.depths.data, cameras, classes, scores
    )
    if timings is not None:
        timings["assembly"] = timings.get("assembly", 0.0) + time.perf_counter() - t0
    return outputs, predictions, cloud


def build_reference_cloud(bundle: SceneBundle):
    """Ground-truth point cloud: every valid pixel unprojected, labeled by the
    instance map (-1 for background/plane)."""
    points, labels = [], []
    for i, cam in enumerate(bundle.cameras):
        p, (vs, us) = reconstruct.unproject_depth_map(bundle.depths[i], cam)
        points.append(p)
        labels.append(bundle.instance_maps[i, vs, us])
    return np.concatenate(points), np.concatenate(labels).astype(np.int64)


def evaluate_scene(model: Model, bundle: SceneBundle, use_superpoints: bool = False):
    """Predictions mapped onto the scene's ground-truth cloud.

    Returns per-scene prediction/gt instance records (point-id sets), depth
    metrics inputs, and attention diagnostics for matched queries.
    """
    outputs = model.forward(bundle.images, record_attention=True)
    predictions = predict_instances(model, outputs)
    gt_points, gt_labels = build_reference_cloud(bundle)

    if predictions:
        masks = np.stack([p.masks for p in predictions])
        scores = np.array([p.score for p in predictions])
        labels, _ = reconstruct.map_to_reference(
            gt_points, masks, bundle.cameras, bundle.depths, scores=scores
        )
        if use_superpoints:
            segments = superpoint_segments(gt_points, gt_labels)
            labels = reconstruct.superpoint_vote(labels, segments)
    else:
        labels = np.full(gt_points.shape[0], -1, dtype=np.int64)

    pred_records = [
        metrics.InstanceRecord(
            points=frozenset(np.nonzero(labels == m)[0].tolist()),
            class_index=p.class_index,
            score=p.score,
        )
        for m, p in enumerate(predictions)
    ]
    gt_records = []
    for k, cls in zip(bundle.instance_ids, bundle.instance_classes):
        pts = frozenset(np.nonzero(gt_labels == k)[0].tolist())
        if pts:
            gt_records.append(metrics.InstanceRecord(points=pts, class_index=int(cls)))

    diag = _attention_diagnostics(model, outputs, bundle)
    return pred_records, gt_records, outputs.depths.data, bundle.depths, diag


def _attention_diagnostics(model: Model, outputs, bundle: SceneBundle) -> dict:
    """Entropy of matched queries' final-layer attention (frame and token level).

    Matching here uses the class+mask cost only so the protocol is identical
    across training modes.
    """
    n_views = bundle.images.shape[0]
    counts = bundle.pixel_counts
    kept = counts.sum(axis=1) >= MIN_VISIBLE_PIXELS
    if not kept.any() or not outputs.attention:
        return {"frame_entropy": float("nan"), "token_entropy": float("nan")}
    half = bundle.half_masks
    flat_gt = np.stack(
        [(half == k).astype(np.float64).ravel() for k in bundle.instance_ids[kept]]
    )
    with ad.no_grad():
        class_probs = ad.softmax_lastdim(Tensor(outputs.class_logits.data)).data
        mask_probs = model.mask_probability(outputs.queries, outputs.features).data
    o = model.config.num_queries
    flat_masks = mask_probs.transpose(1, 0, 2).reshape(o, -1)
    cost = matching.match_cost(
        class_probs, flat_masks, bundle.instance_classes[kept], flat_gt,
        matching.LossWeights(),
    )
    assignment = matching.hungarian(cost)
    last = outputs.attention[-1].data
    frame_h, token_h = [], []
    for j, _ in assignment.pairs:
        marginal = attn_align.marginalize_frames(last[j], outputs.view_boundaries)
        frame_h.append(metrics.attention_entropy(marginal))
        token_h.append(metrics.attention_entropy(last[j]))
    return {
        "frame_entropy": float(np.mean(frame_h)),
        "token_entropy": float(np.mean(token_h)),
    }


def evaluate_dataset(
    model: Model,
    scenes_data: list[SceneData],
    class_agnostic: bool = True,
    use_superpoints: bool = False,
) -> dict:
    """Pooled mAP over scenes plus depth metrics and attention diagnostics."""
    all_preds, all_gts = [], []
    abs_rels, deltas, frame_hs, token_hs = [], [], [], []
    offset = 0
    for scene in scenes_data:
        bundle = bundle_scene(scene)
        preds, gts, pred_depths, gt_depths, diag = evaluate_scene(
            model, bundle, use_superpoints=use_superpoints
        )
        for rec in preds:
            all_preds.append(
                metrics.InstanceRecord(
                    frozenset(i + offset for i in rec.points), rec.class_index, rec.score
                )
            )
        for rec in gts:
            all_gts.append(
                metrics.InstanceRecord(
                    frozenset(i + offset for i in rec.points), rec.class_index, rec.score
                )
            )
        n_points = sum(int((d > 0).sum()) for d in gt_depths)
        offset += n_points
        abs_rel, delta = metrics.depth_metrics(pred_depths, gt_depths)
        abs_rels.append(abs_rel)
        deltas.append(delta)
        if math.isfinite(diag["frame_entropy"]):
            frame_hs.append(diag["frame_entropy"])
            token_hs.append(diag["token_entropy"])
    suite = metrics.map_suite(all_preds, all_gts, class_agnostic=class_agnostic)
    return {
        "map": suite.map_all,
        "map50": suite.map_50,
        "map25": suite.map_25,
        "abs_rel": float(np.mean(abs_rels)),
        "delta_125": float(np.mean(deltas)),
        "frame_entropy": float(np.mean(frame_hs)) if frame_hs else float("nan"),
        "token_entropy": float(np.mean(token_hs)) if token_hs else float("nan"),
        "n_predictions": len(all_preds),
        "n_ground_truth": len(all_gts),
    }
