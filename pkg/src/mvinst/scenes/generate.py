"""Deterministic synthetic scene sampling.

Scenes hold floating spheres and axis-aligned boxes above a ground plane,
with cameras on a jittered orbit looking at the object centroid. Object
classes encode shape and size (sphere-small, sphere-large, box-small,
box-large) so nearby instances of the same class occur regularly.

Surfaces are kept at least MIN_SEPARATION apart (pairwise and above the
plane) so that depth-based visibility tests at eval time can never confuse
two instances: two surface points on the same ray are at least that far
apart in depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraParams, look_at_camera

DEFAULT_NUM_CLASSES = 4
MIN_SEPARATION = 0.35
CLASS_NAMES = ("sphere-small", "sphere-large", "box-small", "box-large")


class GenerationError(RuntimeError):
    """Rejection sampling exhausted its attempt budget."""


@dataclass
class SceneObject:
    kind: str  # "sphere" or "box"
    center: np.ndarray  # (3,)
    size: np.ndarray  # sphere: (1,) radius; box: (3,) half extents
    class_index: int
    instance_id: int

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(self.size))


@dataclass
class SceneSpec:
    seed: int
    objects: list[SceneObject]
    ground_plane: bool
    cameras: list[CameraParams]


def _sample_object(rng: np.random.Generator, instance_id: int, bounds: float) -> SceneObject:
    is_box = bool(rng.integers(0, 2))
    is_large = bool(rng.integers(0, 2))
    class_index = 2 * int(is_box) + int(is_large)
    if is_box:
        lo, hi = (0.5, 0.75) if is_large else (0.25, 0.4)
        size = rng.uniform(lo, hi, size=3)
        base_height = size[1]
    else:
        lo, hi = (0.55, 0.8) if is_large else (0.28, 0.42)
        size = rng.uniform(lo, hi, size=1)
        base_height = size[0]
    x = rng.uniform(-bounds, bounds)
    z = rng.uniform(-bounds, bounds)
    # float above the plane; the clearance keeps plane/object depth gaps large
    y = base_height + MIN_SEPARATION + rng.uniform(0.1, 1.1)
    return SceneObject(
        kind="box" if is_box else "sphere",
        center=np.array([x, y, z]),
        size=size,
        class_index=class_index,
        instance_id=instance_id,
    )


def _too_close(obj: SceneObject, placed: list[SceneObject]) -> bool:
    for other in placed:
        gap = np.linalg.norm(obj.center - other.center) - obj.bounding_radius() - other.bounding_radius()
        if gap < MIN_SEPARATION:
            return True
    return False


def generate_scene(
    seed: int,
    n_objects: int,
    n_views: int,
    bounds: float = 2.0,
    max_attempts: int = 200,
) -> SceneSpec:
    """Deterministic scene as a function of seed.

    Raises GenerationError (echoing the seed) if object placement cannot
    satisfy the separation constraint within the attempt budget, or if some
    camera sees no object.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    rng = np.random.default_rng(seed)

    objects: list[SceneObject] = []
    for instance_id in range(n_objects):
        for attempt in range(max_attempts):
            candidate = _sample_object(rng, instance_id, bounds)
            if not _too_close(candidate, objects):
                objects.append(candidate)
                break
        else:
            raise GenerationError(
                f"seed {seed}: could not place object {instance_id} "
                f"after {max_attempts} attempts"
            )

    centroid = np.mean([o.center for o in objects], axis=0)
    cameras: list[CameraParams] = []
    for i in range(n_views):
        for attempt in range(max_attempts):
            # each camera frames the neighborhood of one object rather than
            # the whole scene, so instances show up in a varying subset of
            # views with varying areas
            aim = objects[int(rng.integers(0, len(objects)))]
            angle = 2.0 * np.pi * i / n_views + rng.uniform(-0.4, 0.4)
            radius = rng.uniform(3.8, 5.2)
            height = rng.uniform(1.8, 3.4)
            eye = np.array(
                [centroid[0] + radius * np.cos(angle), height, centroid[2] + radius * np.sin(angle)]
            )
            target = aim.center + rng.uniform(-0.3, 0.3, size=3)
            fov_v = rng.uniform(0.62, 0.82)
            fov_h = fov_v + rng.uniform(-0.04, 0.04)
            cam = look_at_camera(eye, target, (fov_v, fov_h))
            if _sees_an_object(cam, objects):
                cameras.append(cam)
                break
        else:
            raise GenerationError(
                f"seed {seed}: could not place camera {i} after {max_attempts} attempts"
            )

    return SceneSpec(seed=int(seed), objects=objects, ground_plane=True, cameras=cameras)


def _sees_an_object(cam: CameraParams, objects: list[SceneObject]) -> bool:
    # probe render at low resolution; import here to avoid a module cycle
    from .render import render_view

    probe = SceneSpec(seed=0, objects=objects, ground_plane=False, cameras=[])
    sample = render_view(probe, cam, (32, 32))
    return bool((sample.instance_map >= 0).any())
