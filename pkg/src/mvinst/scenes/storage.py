"""On-disk dataset format.

Layout per dataset directory:
  manifest.json           format_version 1, class count, scene table with
                          per-scene geometry (objects, seed) so ground-truth
                          masks can be re-rendered at any resolution
  scene_{s}/view_{i}.ppm  P6 binary, 8-bit RGB
  scene_{s}/view_{i}.depth  "SVDP", H, W (LE u32), H*W LE float64, -1 invalid
  scene_{s}/view_{i}.inst   "SVIN", same header, H*W LE int32, -1 background
  scene_{s}/cameras.json  per view quaternion/translation/fov, 17 significant
                          digits

Round trips are bitwise exact: rasters byte-for-byte, reals through 17-digit
decimal or raw IEEE-754.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraParams
from .generate import SceneObject, SceneSpec
from .render import ViewSample

FORMAT_VERSION = 1
DEPTH_MAGIC = b"SVDP"
INST_MAGIC = b"SVIN"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class SceneData:
    spec: SceneSpec
    views: list[ViewSample]


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _fmt_list(xs) -> str:
    return "[" + ", ".join(_fmt(x) for x in xs) + "]"


# -- raster io ---------------------------------------------------------------


def write_ppm(path: Path, rgb: np.ndarray):
    h, w, _ = rgb.shape
    data = np.round(rgb * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DatasetError(f"{path}: not a P6 PPM (offset 0)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header (offset {pos})")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    expected = h * w * 3
    body = raw[pos : pos + expected]
    if len(body) != expected:
        raise DatasetError(
            f"{path}: truncated pixel data, expected {expected} bytes at offset {pos}, "
            f"got {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def _write_raster(path: Path, magic: bytes, array: np.ndarray, dtype: str):
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", h, w))
        f.write(array.astype(dtype).tobytes())


def _read_raster(path: Path, magic: bytes, dtype: str, itemsize: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r} (offset 0), expected {magic!r}")
    if len(raw) < 12:
        raise DatasetError(f"{path}: truncated header, {len(raw)} bytes (offset {len(raw)})")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * itemsize
    if len(raw) != expected:
        raise DatasetError(
            f"{path}: expected {expected} bytes for {h}x{w} raster, got {len(raw)} "
            f"(offset {min(len(raw), expected)})"
        )
    return np.frombuffer(raw, dtype=dtype, offset=12).reshape(h, w).copy()


def write_depth(path: Path, depth: np.ndarray):
    _write_raster(path, DEPTH_MAGIC, depth, "<f8")


def read_depth(path: Path) -> np.ndarray:
    return _read_raster(path, DEPTH_MAGIC, "<f8", 8)


def write_instances(path: Path, inst: np.ndarray):
    _write_raster(path, INST_MAGIC, inst, "<i4")


def read_instances(path: Path) -> np.ndarray:
    return _read_raster(path, INST_MAGIC, "<i4", 4).astype(np.int32)


# -- cameras -----------------------------------------------------------------


def write_cameras(path: Path, cams: list[CameraParams]):
    entries = []
    for cam in cams:
        entries.append(
            "    {"
            f'"quaternion": {_fmt_list(cam.quat)}, '
            f'"translation": {_fmt_list(cam.trans)}, '
            f'"fov": {_fmt_list(cam.fov)}'
            "}"
        )
    path.write_text('{"views": [\n' + ",\n".join(entries) + "\n]}\n", encoding="utf-8")


def read_cameras(path: Path) -> list[CameraParams]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON at offset {e.pos}") from e
    return [
        CameraParams(np.array(v["quaternion"]), np.array(v["translation"]), np.array(v["fov"]))
        for v in doc["views"]
    ]


# -- dataset -----------------------------------------------------------------


def write_dataset(scenes: list[SceneData], directory, num_classes: int):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scene_entries = []
    for s, scene in enumerate(scenes):
        views = scene.views
        h, w = views[0].depth.shape
        sdir = directory / f"scene_{s}"
        sdir.mkdir(exist_ok=True)
        for i, view in enumerate(views):
            write_ppm(sdir / f"view_{i}.ppm", view.rgb)
            write_depth(sdir / f"view_{i}.depth", view.depth)
            write_instances(sdir / f"view_{i}.inst", view.instance_map)
        write_cameras(sdir / "cameras.json", [v.camera for v in views])
        objects = []
        for o in scene.spec.objects:
            objects.append(
                "      {"
                f'"kind": "{o.kind}", "id": {o.instance_id}, "class": {o.class_index}, '
                f'"center": {_fmt_list(o.center)}, "size": {_fmt_list(o.size)}'
                "}"
            )
        instances = ", ".join(
            f'{{"id": {o.instance_id}, "class": {o.class_index}}}' for o in scene.spec.objects
        )
        scene_entries.append(
            f'    {{"name": "scene_{s}", "n_views": {len(views)}, "height": {h}, '
            f'"width": {w}, "seed": {scene.spec.seed}, '
            f'"ground_plane": {"true" if scene.spec.ground_plane else "false"},\n'
            f'     "instances": [{instances}],\n'
            '     "objects": [\n' + ",\n".join(objects) + "\n     ]}"
        )
    manifest = (
        '{"format_version": %d, "num_classes": %d, "scenes": [\n%s\n]}\n'
        % (FORMAT_VERSION, num_classes, ",\n".join(scene_entries))
    )
    (directory / "manifest.json").write_text(manifest, encoding="utf-8")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON at offset {e.pos}") from e
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"{path}: unknown format_version {version!r}, this reader supports {FORMAT_VERSION}"
        )
    return doc


def _spec_from_entry(entry: dict, cameras: list[CameraParams]) -> SceneSpec:
    objects = [
        SceneObject(
            kind=o["kind"],
            center=np.array(o["center"], dtype=np.float64),
            size=np.array(o["size"], dtype=np.float64),
            class_index=int(o["class"]),
            instance_id=int(o["id"]),
        )
        for o in entry["objects"]
    ]
    return SceneSpec(
        seed=int(entry["seed"]),
        objects=objects,
        ground_plane=bool(entry["ground_plane"]),
        cameras=cameras,
    )


def read_scene(directory, entry: dict) -> SceneData:
    sdir = Path(directory) / entry["name"]
    cams = read_cameras(sdir / "cameras.json")
    if len(cams) != entry["n_views"]:
        raise DatasetError(f"{sdir}: manifest lists {entry['n_views']} views, found {len(cams)}")
    views = []
    for i, cam in enumerate(cams):
        views.append(
            ViewSample(
                rgb=read_ppm(sdir / f"view_{i}.ppm"),
                depth=read_depth(sdir / f"view_{i}.depth"),
                instance_map=read_instances(sdir / f"view_{i}.inst"),
                camera=cam,
            )
        )
    return SceneData(spec=_spec_from_entry(entry, cams), views=views)


def read_dataset(directory) -> tuple[list[SceneData], int]:
    """All scenes plus the class count; inverse of write_dataset."""
    doc = read_manifest(directory)
    scenes = [read_scene(directory, entry) for entry in doc["scenes"]]
    return scenes, int(doc["num_classes"])


def read_scene_dir(scene_dir) -> SceneData:
    """One scene directory (scene_{s}/ inside a dataset); the dataset manifest
    must sit in the parent directory."""
    scene_dir = Path(scene_dir)
    doc = read_manifest(scene_dir.parent)
    for entry in doc["scenes"]:
        if entry["name"] == scene_dir.name:
            return read_scene(scene_dir.parent, entry)
    raise DatasetError(f"{scene_dir}: no manifest entry named {scene_dir.name!r}")
