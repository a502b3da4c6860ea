"""Analytic ray casting renderer.

Per-pixel rays are intersected with every primitive; the nearest positive
hit wins. Depth is camera-frame z (exactly the ray parameter, see
camera.pixel_rays), so geometric invariants downstream hold to machine
precision. Sky pixels carry depth -1.0 and instance -1; ground-plane pixels
carry valid depth and instance -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraParams, pixel_rays
from .generate import SceneObject, SceneSpec

_LIGHT_DIR = np.array([0.45, 0.8, 0.4])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_PLANE_RGB = np.array([0.72, 0.72, 0.72])
PLANE_RADIUS = 12.0  # ground is a finite disk; beyond it rays see sky


class VisibilityError(ValueError):
    """Instance occupies zero pixels in every view."""


@dataclass
class ViewSample:
    """One rendered view plus its camera."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1], quantized to 8-bit levels
    depth: np.ndarray  # (H, W), camera-frame z, -1.0 where invalid
    instance_map: np.ndarray  # (H, W) int32, -1 background
    camera: CameraParams


@dataclass
class TargetVisibility:
    """Area-proportional per-frame distribution for one instance."""

    probs: np.ndarray  # (N,), sums to 1
    counts: np.ndarray  # (N,) raw pixel counts


def instance_color(instance_id: int) -> np.ndarray:
    """Deterministic saturated base color per instance id (golden-angle hue)."""
    hue = (instance_id * 0.6180339887498949) % 1.0
    h6 = hue * 6.0
    k = np.array([(h6 + 5.0) % 6.0, (h6 + 3.0) % 6.0, (h6 + 1.0) % 6.0])
    return 1.0 - 0.85 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / a
    t_far = (-b + sq) / a
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _intersect_box(origin, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    # rays parallel to a slab: +-inf bounds do the right thing unless the
    # origin sits exactly on a face plane, which sampling never produces
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


def _intersect_plane(origin, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[1] / dirs[:, 1]
    hit = t > 1e-9
    pts = origin[None, :] + t[:, None] * dirs
    inside = pts[:, 0] ** 2 + pts[:, 2] ** 2 <= PLANE_RADIUS * PLANE_RADIUS
    return np.where(hit & inside, t, np.inf)


def _sphere_normal(points, center, radius):
    return (points - center) / radius


def _box_normal(points, center, half):
    rel = (points - center) / half
    axis = np.argmax(np.abs(rel), axis=1)
    normals = np.zeros_like(points)
    rows = np.arange(points.shape[0])
    normals[rows, axis] = np.sign(rel[rows, axis])
    return normals


def render_view(scene: SceneSpec, cam: CameraParams, res: tuple[int, int]) -> ViewSample:
    """Ray cast one view at resolution (H, W); pure function of its inputs."""
    height, width = res
    if height < 8 or width < 8 or height % 2 or width % 2:
        raise ValueError(f"resolution must be even and >= 8, got {res}")
    cam.validate()

    origin, dirs = pixel_rays(cam, height, width)
    n_rays = dirs.shape[0]

    best_t = np.full(n_rays, np.inf)
    best_obj = np.full(n_rays, -2, dtype=np.int64)  # -2 sky, -1 plane, >=0 object index
    if scene.ground_plane:
        t = _intersect_plane(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_obj = np.where(closer, -1, best_obj)
    for idx, obj in enumerate(scene.objects):
        if obj.kind == "sphere":
            t = _intersect_sphere(origin, dirs, obj.center, obj.size[0])
        else:
            t = _intersect_box(origin, dirs, obj.center, obj.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_obj = np.where(closer, idx, best_obj)

    depth = np.where(np.isfinite(best_t), best_t, -1.0)
    instance_map = np.full(n_rays, -1, dtype=np.int32)
    rgb = np.zeros((n_rays, 3))

    plane_mask = best_obj == -1
    if plane_mask.any():
        rgb[plane_mask] = _PLANE_RGB

    for idx, obj in enumerate(scene.objects):
        mask = best_obj == idx
        if not mask.any():
            continue
        pts = origin + best_t[mask, None] * dirs[mask]
        if obj.kind == "sphere":
            normals = _sphere_normal(pts, obj.center, obj.size[0])
        else:
            normals = _box_normal(pts, obj.center, obj.size)
        shade = 0.35 + 0.65 * np.clip(normals @ _LIGHT_DIR, 0.0, 1.0)
        rgb[mask] = instance_color(obj.instance_id) * shade[:, None]
        instance_map[mask] = obj.instance_id

    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0  # 8-bit levels, exact on disk
    return ViewSample(
        rgb=rgb.reshape(height, width, 3),
        depth=depth.reshape(height, width),
        instance_map=instance_map.reshape(height, width),
        camera=cam,
    )


def render_instance_masks(
    scene: SceneSpec, cams: list[CameraParams], res: tuple[int, int]
) -> np.ndarray:
    """Instance-id maps (N, H, W) ray cast directly at the given resolution."""
    return np.stack([render_view(scene, cam, res).instance_map for cam in cams])


def visibility_distribution(views: list[ViewSample], instance_id: int) -> TargetVisibility:
    """Per-frame visible-area distribution of one instance (sums to 1)."""
    counts = np.array(
        [int((v.instance_map == instance_id).sum()) for v in views], dtype=np.int64
    )
    total = counts.sum()
    if total == 0:
        raise VisibilityError(
            f"instance {instance_id} occupies zero pixels in all {len(views)} views"
        )
    return TargetVisibility(probs=counts / total, counts=counts)


def superpoint_segments(points: np.ndarray, labels: np.ndarray, cell: float = 0.5) -> np.ndarray:
    """Synthetic over-segmentation of a labeled point cloud.

    Points are grouped by (instance label, coarse spatial cell), mimicking a
    geometric over-segmentation that respects instance boundaries. Returns
    consecutive segment ids.
    """
    cells = np.floor(points / cell).astype(np.int64)
    keys = np.concatenate([labels[:, None], cells], axis=1)
    _, seg = np.unique(keys, axis=0, return_inverse=True)
    return seg.astype(np.int64)
