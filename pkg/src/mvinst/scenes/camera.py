"""Camera parameterization and pinhole projection math.

Convention, fixed project-wide: extrinsics map world to camera,
x_cam = R x_world + t, with the camera looking along +z, image x right and
image y down. Intrinsics come from the field of view and the render
resolution, principal point at the image center, pixel centers at
(u + 0.5, v + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraParams:
    """Unit quaternion (w-first), translation, and (vertical, horizontal) fov."""

    quat: np.ndarray
    trans: np.ndarray
    fov: np.ndarray

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.fov = np.asarray(self.fov, dtype=np.float64)

    def validate(self):
        if self.quat.shape != (4,) or self.trans.shape != (3,) or self.fov.shape != (2,):
            raise ValueError("camera fields must have shapes (4,), (3,), (2,)")
        if abs(np.linalg.norm(self.quat) - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {np.linalg.norm(self.quat)} != 1")
        if not np.all((self.fov > 0.0) & (self.fov < math.pi)):
            raise ValueError(f"fov components must lie in (0, pi), got {self.fov}")

    def as_vector(self) -> np.ndarray:
        """9-vector [quat, translation, fov]."""
        return np.concatenate([self.quat, self.trans, self.fov])

    @staticmethod
    def from_vector(g: np.ndarray) -> "CameraParams":
        g = np.asarray(g, dtype=np.float64)
        return CameraParams(g[0:4], g[4:7], g[7:9])

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w-first, w >= 0) of a rotation matrix."""
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def look_at_camera(eye, target, fov, up=(0.0, 1.0, 0.0)) -> CameraParams:
    """Camera at eye, optical axis through target, image kept upright."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(r)
    if n < 1e-12:
        raise ValueError("look direction is parallel to the up vector")
    r = r / n
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    return CameraParams(matrix_to_quat(rot), -rot @ eye, np.asarray(fov, dtype=np.float64))


def intrinsics(cam: CameraParams, height: int, width: int) -> tuple[float, float, float, float]:
    """(fx, fy, cx, cy) for a given render resolution."""
    fov_v, fov_h = cam.fov
    fx = (width / 2.0) / math.tan(fov_h / 2.0)
    fy = (height / 2.0) / math.tan(fov_v / 2.0)
    return fx, fy, width / 2.0, height / 2.0


def pixel_rays(cam: CameraParams, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray origin (3,) and directions (H*W, 3) through pixel centers.

    Directions are scaled so the ray parameter equals camera-frame z, i.e.
    depth of a hit at parameter tau is exactly tau.
    """
    fx, fy, cx, cy = intrinsics(cam, height, width)
    u = (np.arange(width, dtype=np.float64) + 0.5 - cx) / fx
    v = (np.arange(height, dtype=np.float64) + 0.5 - cy) / fy
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    rot = cam.rotation()
    origin = -rot.T @ cam.trans
    return origin, dirs_cam @ rot  # rows: R^T d_cam


def project(points_world: np.ndarray, cam: CameraParams, height: int, width: int):
    """Continuous pixel coordinates (u, v) and camera depth z of world points."""
    fx, fy, cx, cy = intrinsics(cam, height, width)
    pc = points_world @ cam.rotation().T + cam.trans
    z = pc[..., 2]
    u = fx * pc[..., 0] / z + cx
    v = fy * pc[..., 1] / z + cy
    return u, v, z


def unproject_pixels(us, vs, depths, cam: CameraParams, height: int, width: int) -> np.ndarray:
    """World points of pixel indices (u, v) with camera-frame depths.

    Uses pixel centers (u + 0.5, v + 0.5); x_world = R^T (d K^{-1} p - t).
    """
    fx, fy, cx, cy = intrinsics(cam, height, width)
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    x = (us + 0.5 - cx) / fx * depths
    y = (vs + 0.5 - cy) / fy * depths
    pc = np.stack([x, y, depths], axis=-1)
    return (pc - cam.trans) @ cam.rotation()


def relative_to_reference(cams: list[CameraParams]) -> list[CameraParams]:
    """Re-express extrinsics in the frame of the first camera (the gauge)."""
    r0 = cams[0].rotation()
    t0 = cams[0].trans
    out = []
    for cam in cams:
        r = cam.rotation() @ r0.T
        t = cam.trans - r @ t0
        out.append(CameraParams(matrix_to_quat(r), t, cam.fov.copy()))
    return out
