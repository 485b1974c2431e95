"""Pinhole cameras and per-pixel ray generation.

Camera frames follow the OpenCV convention: +x right, +y down, +z along
the optical axis.  Pixel (u, v) refers to column ``u`` and row ``v`` and
its center sits at integer coordinates, so ``cx = (W - 1) / 2`` centers the
principal point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .articulation import RigidTransform


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)  # camera-to-world

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, pose: RigidTransform | None = None, resolution: int = 64, focal: float = 64.0):
        c = (resolution - 1) / 2.0
        return cls(focal, focal, c, c, resolution, resolution, pose or RigidTransform.identity())

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return replace(self, pose=pose)

    def intrinsics_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    def to_dict(self) -> dict:
        return {**self.intrinsics_dict(), "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), RigidTransform.from_dict(d.get("pose", {})),
        )


def all_pixels(camera: Camera) -> np.ndarray:
    """(H*W, 2) integer (u, v) coordinates in row-major order."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray origins and unit directions through pixel centers."""
    if pixels is None:
        pixels = all_pixels(camera)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pixels) and (
        pixels[:, 0].min() < 0 or pixels[:, 0].max() > camera.width - 1
        or pixels[:, 1].min() < 0 or pixels[:, 1].max() > camera.height - 1
    ):
        raise ValueError("pixel outside the image")
    d_cam = np.stack(
        [(pixels[:, 0] - camera.cx) / camera.fx, (pixels[:, 1] - camera.cy) / camera.fy, np.ones(len(pixels))],
        axis=-1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = camera.pose.apply_direction(d_cam)
    origins = np.broadcast_to(camera.pose.translation, dirs.shape).copy()
    return origins, dirs


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 1 - 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    down = -(up - (up @ fwd) * fwd)
    down /= np.linalg.norm(down)
    right = np.cross(down, fwd)
    m = np.eye(4)
    m[:3, :3] = np.stack([right, down, fwd], axis=1)
    m[:3, 3] = eye
    return RigidTransform.from_matrix(m)


def sphere_direction(rng: np.random.Generator, upper_only: bool = False) -> np.ndarray:
    """Uniform unit vector on the sphere (or the z >= 0 hemisphere)."""
    z = rng.random() if upper_only else 2.0 * rng.random() - 1.0
    phi = 2.0 * np.pi * rng.random()
    s = np.sqrt(max(0.0, 1.0 - z * z))
    return np.array([s * np.cos(phi), s * np.sin(phi), z])
