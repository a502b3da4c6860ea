from .camera import CameraParams, look_at_camera, project, unproject_pixels
from .generate import GenerationError, SceneObject, SceneSpec, generate_scene
from .render import (
    TargetVisibility,
    ViewSample,
    VisibilityError,
    render_instance_masks,
    render_view,
    superpoint_segments,
    visibility_distribution,
)
from .storage import DatasetError, SceneData, read_dataset, write_dataset

__all__ = [
    "CameraParams",
    "DatasetError",
    "GenerationError",
    "SceneData",
    "SceneObject",
    "SceneSpec",
    "TargetVisibility",
    "ViewSample",
    "VisibilityError",
    "generate_scene",
    "look_at_camera",
    "project",
    "read_dataset",
    "render_instance_masks",
    "render_view",
    "superpoint_segments",
    "unproject_pixels",
    "visibility_distribution",
    "write_dataset",
]
