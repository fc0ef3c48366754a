"""Pinhole camera model: intrinsics, camera-from-world poses, projection,
back-projection, and the visibility (frustum + occlusion) test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown intrinsics keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform: p_cam = R @ p_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal within 1e-6")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeError(f"pose matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-from-world pose looking from eye toward target (+z forward,
    +x right, +y down in image coordinates)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = fwd / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ValueError("view direction parallel to up vector")
    x = x / xn
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Pose(r, -r @ eye)


def project(point: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """World point -> (u, v, depth). depth <= 1e-6 flags a behind-camera
    result; u/v are then meaningless but no error is raised."""
    p = pose.transform(np.asarray(point, dtype=np.float64).reshape(3))
    z = p[2]
    if z <= 1e-6:
        return 0.0, 0.0, float(z)
    u = intrinsics.fx * p[0] / z + intrinsics.cx
    v = intrinsics.fy * p[1] / z + intrinsics.cy
    return float(u), float(v), float(z)


def project_many(points: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """Vectorized projection: (M, 3) world points -> (uv (M, 2), depth (M,))."""
    p = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = p[:, 2]
    safe = np.where(z > 1e-6, z, 1.0)
    uv = np.stack(
        [
            intrinsics.fx * p[:, 0] / safe + intrinsics.cx,
            intrinsics.fy * p[:, 1] / safe + intrinsics.cy,
        ],
        axis=1,
    )
    return uv, z


def backproject(u: float, v: float, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel + depth -> camera-space point."""
    return np.array(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ]
    )


def backproject_to_world(u, v, depth, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    return pose.inverse().transform(backproject(u, v, depth, intrinsics))


@dataclass
class RgbdFrame:
    """One registered RGB-D frame: color in [0,1], depth in meters (0 = invalid)."""

    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose
    index: int = 0

    def __post_init__(self):
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ShapeError(f"color must be (H, W, 3), got {self.color.shape}")
        if self.depth.shape != self.color.shape[:2]:
            raise ShapeError(
                f"depth {self.depth.shape} does not match color {self.color.shape[:2]}"
            )
        if (self.intrinsics.height, self.intrinsics.width) != self.depth.shape:
            raise ShapeError("intrinsics resolution does not match the images")
        if self.depth.min() < 0:
            raise ValueError("depth map contains negative values")


def visible(point: np.ndarray, frame: RgbdFrame, depth_tolerance: float = 0.05):
    """Frustum + occlusion test; returns (bool, reason code).

    True iff the projection lands in bounds with positive depth, the stored
    depth there is valid, and |projected - stored| <= depth_tolerance.
    """
    u, v, z = project(point, frame.intrinsics, frame.pose)
    if z <= 1e-6:
        return False, "behind_camera"
    ui, vi = int(round(u)), int(round(v))
    if not (0 <= ui < frame.intrinsics.width and 0 <= vi < frame.intrinsics.height):
        return False, "out_of_frustum"
    stored = float(frame.depth[vi, ui])
    if stored <= 0:
        return False, "invalid_depth"
    if abs(z - stored) > depth_tolerance:
        return False, "occluded"
    return True, "ok"
