"""Command-line pipeline: gen, train, infer, eval, attn, bench.

Every command echoes its fully resolved configuration as a JSON line on
stdout before doing any work, writes its outputs to files, and ends with a
JSON summary. Exit codes: 0 success, 2 usage error, 1 runtime error. The
environment variable SEGVGGT_THREADS caps internal (BLAS) parallelism and
must be applied before numpy is first imported.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap():
    cap = os.environ.get("SEGVGGT_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _echo(command: str, **resolved):
    print(json.dumps({"command": command, "config": resolved}, sort_keys=True), flush=True)


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x64, got {text!r}")
    if h < 8 or w < 8 or h % 2 or w % 2:
        raise argparse.ArgumentTypeError(f"resolution must be even and >= 8, got {text!r}")
    return h, w


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(part) for part in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"range must look like 3..6, got {text!r}")
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid object count range {text!r}")
    return lo, hi


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    import numpy as np

    from .scenes import SceneData, generate_scene, render_view, write_dataset
    from .scenes.generate import DEFAULT_NUM_CLASSES

    height, width = args.res
    lo, hi = args.objects
    _echo(
        "gen",
        out=str(args.out),
        scenes=args.scenes,
        views=args.views,
        res=f"{height}x{width}",
        objects=f"{lo}..{hi}",
        seed=args.seed,
    )
    rng = np.random.default_rng(args.seed)
    scene_seeds = np.random.SeedSequence(args.seed).generate_state(args.scenes).tolist()
    data = []
    for s in range(args.scenes):
        n_objects = int(rng.integers(lo, hi + 1))
        spec = generate_scene(scene_seeds[s], n_objects, args.views)
        views = [render_view(spec, cam, (height, width)) for cam in spec.cameras]
        data.append(SceneData(spec, views))
    write_dataset(data, args.out, DEFAULT_NUM_CLASSES)
    print(
        json.dumps(
            {
                "written": str(args.out),
                "scenes": args.scenes,
                "views_per_scene": args.views,
                "resolution": [height, width],
                "num_classes": DEFAULT_NUM_CLASSES,
                "objects_per_scene": [
                    len(d.spec.objects) for d in data
                ],
            }
        )
    )
    return 0


_FADA_FLAGS = {"off": "off", "loss": "loss_only", "loss+cost": "loss_and_cost"}


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    config_path = Path(args.config)
    if not config_path.exists():
        print(f"usage error: config file {config_path} not found", file=sys.stderr)
        return 2
    config = TrainConfig.from_json(config_path.read_text())
    if args.fada is not None:
        config.fada_enabled = _FADA_FLAGS[args.fada]
    config.validate()
    log_path = args.log if args.log else f"{args.out}.log.jsonl"
    _echo("train", **json.loads(config.to_json()), out=str(args.out), log=str(log_path))
    model, records = train(config, out_checkpoint=args.out, log_path=log_path)
    print(
        json.dumps(
            {
                "checkpoint": str(args.out),
                "log": str(log_path),
                "steps": len(records),
                "final_loss": records[-1]["total"],
            }
        )
    )
    return 0


def cmd_infer(args) -> int:
    import numpy as np

    from . import reconstruct
    from .model import load_checkpoint
    from .scenes.storage import read_scene_dir
    from .training import infer, predict_instances

    model = load_checkpoint(args.ckpt)
    scene = read_scene_dir(args.scene)
    images = np.stack([v.rgb for v in scene.views])
    cfg = model.config
    if images.shape[1:3] != (cfg.height, cfg.width):
        raise ValueError(
            f"scene resolution {images.shape[1:3]} does not match checkpoint "
            f"({cfg.height}, {cfg.width})"
        )
    _echo("infer", ckpt=str(args.ckpt), scene=str(args.scene), out=str(args.out),
          map_to_gt=bool(args.map_to_gt))
    outputs, predictions, cloud = infer(model, images)
    if args.map_to_gt:
        # evaluation-privileged output: project predicted masks onto the
        # ground-truth cloud (the benchmark mapping protocol)
        gt_depths = np.stack([v.depth for v in scene.views])
        cams = [v.camera for v in scene.views]
        points_list, labels_list = [], []
        for i, cam in enumerate(cams):
            pts, (vs, us) = reconstruct.unproject_depth_map(gt_depths[i], cam)
            points_list.append(pts)
        gt_points = np.concatenate(points_list)
        if predictions:
            masks = np.stack([p.masks for p in predictions])
            scores = np.array([p.score for p in predictions])
            labels, _ = reconstruct.map_to_reference(gt_points, masks, cams, gt_depths, scores=scores)
        else:
            labels = np.full(gt_points.shape[0], -1, dtype=np.int64)
        records = [
            (p.class_index, p.score, gt_points[labels == m])
            for m, p in enumerate(predictions)
        ]
    else:
        records = reconstruct.segmentation_to_instances(cloud)
    reconstruct.write_predictions(args.out, records)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "instances": len(records),
                "points": int(sum(r[2].shape[0] for r in records)),
            }
        )
    )
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import metrics, reconstruct
    from .scenes.storage import read_scene_dir
    from .training import bundle_scene, build_reference_cloud

    _echo(
        "eval",
        pred=str(args.pred),
        gt=str(args.gt),
        class_agnostic=bool(args.class_agnostic),
        superpoints=bool(args.superpoints),
        ckpt=str(args.ckpt) if args.ckpt else None,
    )
    scene = read_scene_dir(args.gt)
    bundle = bundle_scene(scene)
    gt_points, gt_labels = build_reference_cloud(bundle)
    instances = reconstruct.read_predictions(args.pred)

    # map predicted xyz points onto reference indices (exact within eps)
    from scipy.spatial import cKDTree

    tree = cKDTree(gt_points)
    pred_records = []
    for class_index, inst_score, pts in instances:
        if pts.shape[0]:
            dist, idx = tree.query(pts, distance_upper_bound=args.eps)
            matched = idx[np.isfinite(dist)]
        else:
            matched = np.zeros(0, dtype=np.int64)
        pred_records.append(
            metrics.InstanceRecord(frozenset(matched.tolist()), int(class_index), float(inst_score))
        )
    if args.superpoints:
        from .scenes import superpoint_segments
        from .reconstruct import superpoint_vote

        labels = np.full(gt_points.shape[0], -1, dtype=np.int64)
        ranked = sorted(range(len(pred_records)), key=lambda m: (pred_records[m].score, -m))
        for m in ranked:
            labels[list(pred_records[m].points)] = m
        segments = superpoint_segments(gt_points, gt_labels)
        labels = superpoint_vote(labels, segments)
        pred_records = [
            metrics.InstanceRecord(
                frozenset(np.nonzero(labels == m)[0].tolist()), rec.class_index, rec.score
            )
            for m, rec in enumerate(pred_records)
        ]

    gt_records = []
    for k, cls in zip(bundle.instance_ids, bundle.instance_classes):
        pts = frozenset(np.nonzero(gt_labels == k)[0].tolist())
        if pts:
            gt_records.append(metrics.InstanceRecord(pts, int(cls)))
    suite = metrics.map_suite(pred_records, gt_records, class_agnostic=args.class_agnostic)

    report = {
        "schema_version": 1,
        "class_agnostic": bool(args.class_agnostic),
        "superpoints": bool(args.superpoints),
        "per_class": {
            str(c): {str(t): ap for t, ap in table.items()}
            for c, table in suite.per_class.items()
        },
        "map": suite.map_all,
        "map50": suite.map_50,
        "map25": suite.map_25,
        "depth": None,
        "entropy": None,
    }
    if args.ckpt:
        from .model import load_checkpoint
        from .training import evaluate_scene

        model = load_checkpoint(args.ckpt)
        _, _, pred_depths, gt_depths, diag = evaluate_scene(model, bundle)
        abs_rel, delta = metrics.depth_metrics(pred_depths, gt_depths)
        report["depth"] = {"abs_rel": abs_rel, "delta_125": delta}
        report["entropy"] = diag
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_attn(args) -> int:
    import numpy as np

    from . import attn_align, metrics
    from .model import load_checkpoint
    from .scenes.storage import read_scene_dir, write_depth
    from mvinst import autodiff as ad

    model = load_checkpoint(args.ckpt)
    scene = read_scene_dir(args.scene)
    images = np.stack([v.rgb for v in scene.views])
    cfg = model.config
    _echo("attn", ckpt=str(args.ckpt), scene=str(args.scene), query=args.query,
          layer=args.layer, out=str(args.out))
    if not 0 <= args.layer < cfg.layers:
        raise ValueError(f"layer {args.layer} out of range [0, {cfg.layers})")
    if not 0 <= args.query < cfg.num_queries:
        raise ValueError(f"query {args.query} out of range [0, {cfg.num_queries})")
    with ad.no_grad():
        outputs = model.forward(images, record_attention=True)
    row = outputs.attention[args.layer].data[args.query]
    boundaries = outputs.view_boundaries
    marginal = attn_align.marginalize_frames(row, boundaries)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"layer{args.layer}_query{args.query}"
    write_depth(out_dir / f"{prefix}_row.depth", row[None, :])
    write_depth(out_dir / f"{prefix}_marginal.depth", marginal[None, :])
    tv = cfg.tokens_per_view
    for i, (s, e) in enumerate(boundaries):
        write_depth(out_dir / f"{prefix}_frame{i}.depth", row[s:e][None, :])
        patch = row[s + 5 : e].reshape(cfg.grid_h, cfg.grid_w)
        write_depth(out_dir / f"{prefix}_frame{i}_grid.depth", patch)
    table = {
        "schema_version": 1,
        "layer": args.layer,
        "query": args.query,
        "token_entropy": metrics.attention_entropy(row),
        "frame_marginal_entropy": metrics.attention_entropy(marginal),
        "frame_mass": marginal.tolist(),
    }
    (out_dir / f"{prefix}_entropy.json").write_text(json.dumps(table, indent=2))
    print(json.dumps({"out": str(out_dir), "files": 3 + 2 * len(boundaries)}))
    return 0


def cmd_bench(args) -> int:
    import resource
    import time

    import numpy as np

    from .model import load_checkpoint
    from .training import infer

    model = load_checkpoint(args.ckpt)
    cfg = model.config
    _echo("bench", ckpt=str(args.ckpt), frames=args.frames, repeats=args.repeats)
    results = {}
    for n in args.frames:
        if n < 2:
            raise ValueError(f"frame counts must be >= 2, got {n}")
        rng = np.random.default_rng(n)
        images = rng.uniform(size=(n, cfg.height, cfg.width, 3))
        runs = []
        for rep in range(args.repeats + 1):  # one warmup, then measured runs
            timings: dict = {}
            t0 = time.perf_counter()
            infer(model, images, timings=timings)
            timings["total"] = time.perf_counter() - t0
            if rep > 0:
                runs.append(timings)
        results[str(n)] = {
            stage: float(np.mean([r.get(stage, 0.0) for r in runs]))
            for stage in ("embed", "aggregator", "heads", "assembly", "total")
        }
        results[str(n)]["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    report = {"schema_version": 1, "repeats": args.repeats, "warmup": 1, "frames": results}
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvinst",
        description="Multi-view geometry + instance segmentation pipeline on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--res", type=_parse_res, default=(64, 64))
    p.add_argument("--objects", type=_parse_range, default=(3, 6))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--fada", choices=sorted(_FADA_FLAGS), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference on one scene directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--map-to-gt", action="store_true",
                   help="write instances as claimed ground-truth points (benchmark mapping)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a prediction file against a scene")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--superpoints", action="store_true")
    p.add_argument("--ckpt", default=None, help="also report depth/entropy metrics")
    p.add_argument("--eps", type=float, default=1e-6,
                   help="xyz match tolerance onto the reference cloud")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn", help="dump attention rasters and entropy table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("bench", help="runtime and memory benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=_parse_int_list, default=[2, 4])
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 1; argparse handles usage
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
