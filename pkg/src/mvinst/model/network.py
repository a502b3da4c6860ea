"""Multi-view transformer with object queries and decoding heads.

Each forward pass embeds all views into patch + camera + register tokens,
runs L blocks of [per-view frame attention -> global attention over all
tokens -> query cross-attention -> query self-attention], then decodes
cameras, dense depth, half-resolution instance feature maps, and per-query
class logits. The head-averaged cross-attention row of every query at every
layer is exposed for downstream alignment supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import SPECIAL_TOKENS, ModelConfig

_QUAT_NORM_EPS = 1e-30  # keeps the normalization finite; unit norm within 1e-15


@dataclass
class ModelOutputs:
    cameras: Tensor  # (N, 9): quaternion, translation, fov
    depths: Tensor  # (N, H, W), strictly positive
    features: Tensor  # (N, H/2, W/2, d)
    queries: Tensor  # (O, d), final refined queries
    class_logits: Tensor  # (O, C+1), index C is no-object
    attention: list[Tensor]  # per layer: (O, N * tokens_per_view) head-averaged rows
    view_boundaries: list[tuple[int, int]]  # token [start, end) per view

    def feature_maps(self) -> Tensor:
        """Features as (N, d, H/2, W/2) for the shape contract."""
        return ad.permute(self.features, (0, 3, 1, 2))


def _init_specs(cfg: ModelConfig):
    d, hidden = cfg.dim, cfg.mlp_hidden
    specs: list[tuple[str, tuple, str]] = [
        ("embed.proj.w", (cfg.patch * cfg.patch * 3, d), "normal"),
        ("embed.proj.b", (d,), "zeros"),
        ("embed.pos", (cfg.patches_per_view, d), "normal"),
        ("embed.camera", (1, d), "normal"),
        ("embed.register", (4, d), "normal"),
        ("embed.camera_ref", (1, d), "normal"),
        ("embed.register_ref", (4, d), "normal"),
        ("embed.ref_mark", (d,), "normal"),
    ]
    for i in range(cfg.layers):
        for block in ("frame", "global", "qself"):
            p = f"layer{i}.{block}."
            specs += [
                (p + "ln1.g", (d,), "ones"),
                (p + "ln1.b", (d,), "zeros"),
                (p + "wq", (d, d), "normal"),
                (p + "bq", (d,), "zeros"),
                (p + "wk", (d, d), "normal"),
                (p + "bk", (d,), "zeros"),
                (p + "wv", (d, d), "normal"),
                (p + "bv", (d,), "zeros"),
                (p + "wo", (d, d), "normal"),
                (p + "bo", (d,), "zeros"),
                (p + "ln2.g", (d,), "ones"),
                (p + "ln2.b", (d,), "zeros"),
                (p + "mlp.w1", (d, hidden), "normal"),
                (p + "mlp.b1", (hidden,), "zeros"),
                (p + "mlp.w2", (hidden, d), "normal"),
                (p + "mlp.b2", (d,), "zeros"),
            ]
        p = f"layer{i}.cross."
        specs += [
            (p + "wq", (d, d), "normal"),
            (p + "bq", (d,), "zeros"),
            (p + "wk", (d, d), "normal"),
            (p + "bk", (d,), "zeros"),
            (p + "wv", (d, d), "normal"),
            (p + "bv", (d,), "zeros"),
            (p + "wo", (d, d), "normal"),
            (p + "bo", (d,), "zeros"),
        ]
    specs += [
        ("norm_tokens.g", (d,), "ones"),
        ("norm_tokens.b", (d,), "zeros"),
        ("norm_queries.g", (d,), "ones"),
        ("norm_queries.b", (d,), "zeros"),
        ("head.camera.w1", (d, cfg.head_hidden), "normal"),
        ("head.camera.b1", (cfg.head_hidden,), "zeros"),
        ("head.camera.w2", (cfg.head_hidden, 9), "normal"),
        ("head.camera.b2", (9,), "zeros"),
        ("head.depth.w", (d, cfg.patch * cfg.patch), "normal"),
        ("head.depth.b", (cfg.patch * cfg.patch,), "depth_bias"),
        ("head.feature.w", (d, (cfg.patch // 2) ** 2 * d), "normal"),
        ("head.feature.b", ((cfg.patch // 2) ** 2 * d,), "zeros"),
        ("head.class.w1", (d, cfg.head_hidden), "normal"),
        ("head.class.b1", (cfg.head_hidden,), "zeros"),
        ("head.class.w2", (cfg.head_hidden, cfg.num_classes + 1), "normal"),
        ("head.class.b2", (cfg.num_classes + 1,), "zeros"),
        ("queries", (cfg.num_queries, d), "normal"),
    ]
    return specs


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _init_specs(cfg):
        if kind == "normal":
            if len(shape) == 2:
                data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "depth_bias":
            # start depth predictions near typical scene depth, exp(1.8) ~ 6
            data = np.full(shape, 1.8)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    # -- token path ----------------------------------------------------------

    def patch_embed(self, images: np.ndarray) -> Tensor:
        """Images (N, H, W, 3) in [0, 1] -> tokens (N, K+5, d).

        Per view: [camera token, 4 register tokens, K patch tokens]; the first
        view gets the reference variants plus a reference mark on its patches.
        """
        cfg = self.config
        n = images.shape[0]
        if images.shape[1:] != (cfg.height, cfg.width, 3):
            raise ValueError(
                f"expected images of shape (N, {cfg.height}, {cfg.width}, 3), got {images.shape}"
            )
        p = cfg.patch
        flat = (
            images.reshape(n, cfg.grid_h, p, cfg.grid_w, p, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, cfg.patches_per_view, p * p * 3)
        )
        tokens = Tensor(flat) @ self.params["embed.proj.w"] + self.params["embed.proj.b"]
        tokens = tokens + self.params["embed.pos"]
        ref = ad.narrow(tokens, 0, 0, 1) + self.params["embed.ref_mark"]
        rest = ad.narrow(tokens, 0, 1, n - 1)
        tokens = ad.concat([ref, rest], axis=0)

        spec_ref = ad.reshape(
            ad.concat([self.params["embed.camera_ref"], self.params["embed.register_ref"]], 0),
            (1, SPECIAL_TOKENS, cfg.dim),
        )
        spec_other = ad.reshape(
            ad.concat([self.params["embed.camera"], self.params["embed.register"]], 0),
            (1, SPECIAL_TOKENS, cfg.dim),
        )
        tiled = Tensor(np.zeros((n - 1, SPECIAL_TOKENS, cfg.dim))) + spec_other
        specials = ad.concat([spec_ref, tiled], axis=0)
        return ad.concat([specials, tokens], axis=1)

    def _attention_block(self, x: Tensor, prefix: str) -> Tensor:
        """Pre-norm multi-head self-attention + MLP, both with residuals."""
        cfg = self.config
        pp = self.params
        b, s, d = x.shape
        nh, dh = cfg.heads, cfg.dim // cfg.heads

        h = ad.layer_norm(x, pp[prefix + "ln1.g"], pp[prefix + "ln1.b"])
        q = ad.permute(ad.reshape(h @ pp[prefix + "wq"] + pp[prefix + "bq"], (b, s, nh, dh)), (0, 2, 1, 3))
        k = ad.permute(ad.reshape(h @ pp[prefix + "wk"] + pp[prefix + "bk"], (b, s, nh, dh)), (0, 2, 1, 3))
        v = ad.permute(ad.reshape(h @ pp[prefix + "wv"] + pp[prefix + "bv"], (b, s, nh, dh)), (0, 2, 1, 3))
        scores = q @ ad.permute(k, (0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax_lastdim(scores)
        out = ad.reshape(ad.permute(attn @ v, (0, 2, 1, 3)), (b, s, d))
        x = x + (out @ pp[prefix + "wo"] + pp[prefix + "bo"])

        h2 = ad.layer_norm(x, pp[prefix + "ln2.g"], pp[prefix + "ln2.b"])
        m = ad.gelu(h2 @ pp[prefix + "mlp.w1"] + pp[prefix + "mlp.b1"])
        return x + (m @ pp[prefix + "mlp.w2"] + pp[prefix + "mlp.b2"])

    def frame_attention(self, x: Tensor, layer: int) -> Tensor:
        """Self-attention restricted to each view's tokens; x is (N, K+5, d)."""
        return self._attention_block(x, f"layer{layer}.frame.")

    def global_attention(self, x: Tensor, layer: int) -> Tensor:
        """Self-attention over the concatenated tokens of all views; x is (1, N*(K+5), d)."""
        return self._attention_block(x, f"layer{layer}.global.")

    def query_self_attention(self, q: Tensor, layer: int) -> Tensor:
        """Query refinement; q is (O, d)."""
        cfg = self.config
        out = self._attention_block(ad.reshape(q, (1, cfg.num_queries, cfg.dim)), f"layer{layer}.qself.")
        return ad.reshape(out, (cfg.num_queries, cfg.dim))

    def query_cross_attention(
        self, q: Tensor, tokens: Tensor, layer: int, record: bool = True
    ) -> tuple[Tensor, Tensor | None]:
        """Queries attend over all multi-view tokens.

        No normalization inside: with identity weights and a single head this
        is exactly q' = q + softmax(q T^T / sqrt(d)) T. Returns the updated
        queries and, when record is set, the head-averaged attention rows
        (O, S), a probability vector per query.
        """
        cfg = self.config
        pp = self.params
        prefix = f"layer{layer}.cross."
        o = cfg.num_queries
        s = tokens.shape[0]
        nh, dh = cfg.heads, cfg.dim // cfg.heads

        qh = ad.permute(ad.reshape(q @ pp[prefix + "wq"] + pp[prefix + "bq"], (o, nh, dh)), (1, 0, 2))
        kh = ad.permute(ad.reshape(tokens @ pp[prefix + "wk"] + pp[prefix + "bk"], (s, nh, dh)), (1, 0, 2))
        vh = ad.permute(ad.reshape(tokens @ pp[prefix + "wv"] + pp[prefix + "bv"], (s, nh, dh)), (1, 0, 2))
        scores = qh @ ad.permute(kh, (0, 2, 1)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax_lastdim(scores)  # (nh, O, S)
        attn_mean = attn.mean(axis=0) if record else None
        out = ad.reshape(ad.permute(attn @ vh, (1, 0, 2)), (o, cfg.dim))
        return q + (out @ pp[prefix + "wo"] + pp[prefix + "bo"]), attn_mean

    # -- decoding heads --------------------------------------------------------

    def camera_head(self, camera_tokens: Tensor) -> Tensor:
        """(N, d) camera tokens -> (N, 9) with unit quaternion and fov in (0, pi)."""
        pp = self.params
        h = ad.gelu(camera_tokens @ pp["head.camera.w1"] + pp["head.camera.b1"])
        raw = h @ pp["head.camera.w2"] + pp["head.camera.b2"]
        n = raw.shape[0]
        quat = ad.narrow(raw, 1, 0, 4) + Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)))
        norm = ad.sqrt((quat * quat).sum(axis=1, keepdims=True) + _QUAT_NORM_EPS)
        quat = quat / norm
        trans = ad.narrow(raw, 1, 4, 3)
        fov = ad.sigmoid(ad.narrow(raw, 1, 7, 2)) * math.pi
        return ad.concat([quat, trans, fov], axis=1)

    def depth_head(self, patch_tokens: Tensor) -> Tensor:
        """(N, K, d) patch tokens -> strictly positive depth (N, H, W)."""
        cfg = self.config
        p = cfg.patch
        logits = patch_tokens @ self.params["head.depth.w"] + self.params["head.depth.b"]
        n = patch_tokens.shape[0]
        grid = ad.reshape(logits, (n, cfg.grid_h, cfg.grid_w, p, p))
        pixels = ad.reshape(ad.permute(grid, (0, 1, 3, 2, 4)), (n, cfg.height, cfg.width))
        return ad.exp(pixels)

    def feature_head(self, patch_tokens: Tensor) -> Tensor:
        """(N, K, d) patch tokens -> instance features (N, H/2, W/2, d)."""
        cfg = self.config
        if cfg.patch < 2:
            raise ValueError("feature head needs patch >= 2")
        hp = cfg.patch // 2
        n = patch_tokens.shape[0]
        out = patch_tokens @ self.params["head.feature.w"] + self.params["head.feature.b"]
        grid = ad.reshape(out, (n, cfg.grid_h, cfg.grid_w, hp, hp, cfg.dim))
        return ad.reshape(
            ad.permute(grid, (0, 1, 3, 2, 4, 5)), (n, cfg.height // 2, cfg.width // 2, cfg.dim)
        )

    def classify(self, queries: Tensor) -> Tensor:
        """(O, d) refined queries -> class logits (O, C+1); index C is no-object."""
        pp = self.params
        h = ad.gelu(queries @ pp["head.class.w1"] + pp["head.class.b1"])
        return h @ pp["head.class.w2"] + pp["head.class.b2"]

    def mask_probability(self, queries: Tensor, features: Tensor) -> Tensor:
        """Sigmoid of query-feature dot products: (N, O, (H/2)*(W/2)) in (0, 1)."""
        cfg = self.config
        n = features.shape[0]
        hw = (cfg.height // 2) * (cfg.width // 2)
        if features.shape[-1] != queries.shape[-1]:
            raise ValueError(
                f"feature dim {features.shape[-1]} != query dim {queries.shape[-1]}"
            )
        flat = ad.reshape(features, (n, hw, cfg.dim))
        return ad.sigmoid(flat @ ad.permute(queries, (1, 0)))

    # -- full forward ----------------------------------------------------------

    def forward(
        self, images: np.ndarray, record_attention: bool = True, timings: dict | None = None
    ) -> ModelOutputs:
        """Single forward pass over N >= 2 views of shape (N, H, W, 3)."""
        import time

        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[0] < 2:
            raise ValueError(f"need at least 2 views of (H, W, 3), got shape {images.shape}")
        n = images.shape[0]
        tv = cfg.tokens_per_view
        total = n * tv

        t0 = time.perf_counter()
        x = self.patch_embed(images)
        t1 = time.perf_counter()

        queries = self.params["queries"]
        attention: list[Tensor] = []
        for layer in range(cfg.layers):
            x = self.frame_attention(x, layer)
            xg = self.global_attention(ad.reshape(x, (1, total, cfg.dim)), layer)
            x = ad.reshape(xg, (n, tv, cfg.dim))
            tokens_flat = ad.reshape(xg, (total, cfg.dim))
            queries, attn = self.query_cross_attention(
                queries, tokens_flat, layer, record=record_attention
            )
            if record_attention:
                attention.append(attn)
            queries = self.query_self_attention(queries, layer)
        t2 = time.perf_counter()

        x = ad.layer_norm(x, self.params["norm_tokens.g"], self.params["norm_tokens.b"])
        queries = ad.layer_norm(
            queries, self.params["norm_queries.g"], self.params["norm_queries.b"]
        )
        camera_tokens = ad.reshape(ad.narrow(x, 1, 0, 1), (n, cfg.dim))
        patch_tokens = ad.narrow(x, 1, SPECIAL_TOKENS, cfg.patches_per_view)
        outputs = ModelOutputs(
            cameras=self.camera_head(camera_tokens),
            depths=self.depth_head(patch_tokens),
            features=self.feature_head(patch_tokens),
            queries=queries,
            class_logits=self.classify(queries),
            attention=attention,
            view_boundaries=[(i * tv, (i + 1) * tv) for i in range(n)],
        )
        t3 = time.perf_counter()
        if timings is not None:
            timings["embed"] = t1 - t0
            timings["aggregator"] = t2 - t1
            timings["heads"] = t3 - t2
        return outputs
