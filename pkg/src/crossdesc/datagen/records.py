"""Correspondence records and their binary container.

Container format ("LCDC"): magic, u32 version, u32 record count, u32 patch
size, u32 points per patch, then fixed-size records: 32-byte scene id,
i32 frame index, 3x f32 world center, f32 radius, patch_size^2 x 3 color
bytes, N x 6 f32 point values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DataError
from .camera import RgbdFrame, project, visible
from .patches import (
    InsufficientPointsError,
    PatchOutOfBoundsError,
    extract_2d_patch,
    extract_3d_patch,
    window_side_px,
)

MAGIC = b"LCDC"
VERSION = 1


@dataclass
class CorrespondenceRecord:
    image_patch: np.ndarray  # (S, S, 3) float32 in [0,1]
    point_patch: np.ndarray  # (N, 6) float32, coords in the unit ball
    scene_id: str
    frame_index: int
    center_world: np.ndarray  # (3,)
    radius: float


@dataclass
class SamplingConfig:
    num_points: int = 512
    radius: float = 0.30
    points_per_patch: int = 1024
    patch_size: int = 64
    depth_tolerance: float = 0.05
    min_ball_points: int = 8
    window_mode: str = "depth_scaled"  # or "fixed"
    fixed_window_px: float = 64.0
    max_records_per_point: int = 0  # 0 = every visible frame
    seed: int = 0

    def __post_init__(self):
        if self.window_mode not in ("depth_scaled", "fixed"):
            raise ValueError(f"unknown window mode {self.window_mode!r}")
        if self.num_points < 1 or self.radius <= 0:
            raise ValueError("num_points >= 1 and radius > 0 required")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sampling config keys: {sorted(unknown)}")
        return cls(**d)


def _point_rng(seed: int, point_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, point_id], dtype=np.uint64)))


def generate_correspondences(
    frames: list[RgbdFrame],
    cloud: np.ndarray,
    scene_id: str,
    cfg: SamplingConfig,
):
    """Sample 3D points from the cloud and pair each one's ball patch with a
    2D crop from every frame that passes the visibility test.

    Returns (records, manifest); the record stream is ordered by
    (point id, frame index) and fully determined by (seed, scene).
    """
    if not frames:
        raise DataError("no frames with valid poses")
    cloud = np.asarray(cloud, dtype=np.float32)
    if cloud.ndim != 2 or cloud.shape[1] != 6 or len(cloud) == 0:
        raise DataError(f"fused cloud must be a non-empty (M, 6) array, got {cloud.shape}")
    rng = np.random.default_rng(cfg.seed)
    n_sample = min(cfg.num_points, len(cloud))
    point_ids = rng.choice(len(cloud), size=n_sample, replace=False)
    tree = cKDTree(cloud[:, :3].astype(np.float64))

    records: list[CorrespondenceRecord] = []
    skipped = {
        "too_few_points_in_ball": 0,
        "behind_camera": 0,
        "out_of_frustum": 0,
        "invalid_depth": 0,
        "occluded": 0,
        "patch_out_of_bounds": 0,
        "per_point_cap": 0,
    }
    for pid, cloud_idx in enumerate(point_ids):
        center = cloud[cloud_idx, :3].astype(np.float64)
        try:
            point_patch = extract_3d_patch(
                cloud, center, cfg.radius, cfg.points_per_patch,
                _point_rng(cfg.seed, pid), tree=tree, min_points=cfg.min_ball_points,
            )
        except InsufficientPointsError:
            skipped["too_few_points_in_ball"] += 1
            continue
        emitted = 0
        for frame in frames:
            ok, reason = visible(center, frame, cfg.depth_tolerance)
            if not ok:
                skipped[reason] += 1
                continue
            if cfg.max_records_per_point and emitted >= cfg.max_records_per_point:
                skipped["per_point_cap"] += 1
                continue
            u, v, depth = project(center, frame.intrinsics, frame.pose)
            if cfg.window_mode == "depth_scaled":
                side = window_side_px(cfg.radius, frame.intrinsics.fx, depth)
            else:
                side = cfg.fixed_window_px
            try:
                image_patch = extract_2d_patch(frame.color, u, v, side, cfg.patch_size)
            except PatchOutOfBoundsError:
                skipped["patch_out_of_bounds"] += 1
                continue
            records.append(
                CorrespondenceRecord(
                    image_patch=image_patch,
                    point_patch=point_patch,
                    scene_id=scene_id,
                    frame_index=frame.index,
                    center_world=center.copy(),
                    radius=cfg.radius,
                )
            )
            emitted += 1
    manifest = {
        "scene_id": scene_id,
        "points_sampled": int(n_sample),
        "records": len(records),
        "skipped": skipped,
        "config": cfg.to_dict(),
    }
    return records, manifest


# -- container I/O -----------------------------------------------------------------


def save_records(path, records: list[CorrespondenceRecord]) -> None:
    if not records:
        raise DataError("refusing to write an empty record container")
    s = records[0].image_patch.shape[0]
    n = records[0].point_patch.shape[0]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, len(records), s, n))
        for rec in records:
            sid = rec.scene_id.encode("utf-8")[:32].ljust(32, b"\0")
            fh.write(sid)
            fh.write(struct.pack("<i", rec.frame_index))
            fh.write(np.asarray(rec.center_world, dtype="<f4").tobytes())
            fh.write(struct.pack("<f", rec.radius))
            img = np.clip(np.round(rec.image_patch * 255.0), 0, 255).astype(np.uint8)
            fh.write(img.tobytes())
            fh.write(np.ascontiguousarray(rec.point_patch, dtype="<f4").tobytes())


def load_records(path) -> list[CorrespondenceRecord]:
    records = []
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"bad record-container magic in {path}")
        version, count, s, n = struct.unpack("<IIII", fh.read(16))
        if version != VERSION:
            raise DataError(f"unsupported record-container version {version}")
        for _ in range(count):
            sid = fh.read(32).rstrip(b"\0").decode("utf-8")
            (frame_index,) = struct.unpack("<i", fh.read(4))
            center = np.frombuffer(fh.read(12), dtype="<f4").astype(np.float64)
            (radius,) = struct.unpack("<f", fh.read(4))
            img = np.frombuffer(fh.read(s * s * 3), dtype=np.uint8).reshape(s, s, 3)
            pts = np.frombuffer(fh.read(n * 6 * 4), dtype="<f4").reshape(n, 6)
            records.append(
                CorrespondenceRecord(
                    image_patch=img.astype(np.float32) / 255.0,
                    point_patch=pts.copy(),
                    scene_id=sid,
                    frame_index=frame_index,
                    center_world=center,
                    radius=float(radius),
                )
            )
    return records


def records_to_arrays(records: list[CorrespondenceRecord]):
    """Stack records into aligned (images, points) training arrays."""
    if not records:
        raise DataError("no records")
    images = np.stack([r.image_patch for r in records]).astype(np.float32)
    points = np.stack([r.point_patch for r in records]).astype(np.float32)
    return images, points


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
