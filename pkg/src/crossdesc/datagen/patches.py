"""Patch extraction: 3D ball neighborhoods normalized to the unit ball, and
depth-scaled 2D crops resampled bilinearly to the network input size."""

from __future__ import annotations

import numpy as np

from ..errors import DataError


class InsufficientPointsError(DataError):
    """Fewer points in the ball than the minimum; the record is skipped."""


class PatchOutOfBoundsError(DataError):
    """The 2D source window lies mostly outside the image."""


def extract_3d_patch(
    cloud: np.ndarray,
    center: np.ndarray,
    radius: float,
    n: int,
    rng: np.random.Generator,
    tree=None,
    min_points: int = 8,
) -> np.ndarray:
    """Points within the ball, resampled to exactly n, recentered at center
    and scaled by 1/radius; colors pass through.

    Sampling is uniform without replacement when the ball holds more than n
    points; smaller balls keep every point and top up with replacement.
    """
    cloud = np.asarray(cloud)
    if cloud.ndim != 2 or cloud.shape[1] != 6:
        raise DataError(f"cloud must be (M, 6), got {cloud.shape}")
    if cloud.shape[0] == 0:
        raise DataError("empty cloud")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if tree is not None:
        idx = np.sort(np.asarray(tree.query_ball_point(center, radius), dtype=int))
    else:
        d2 = ((cloud[:, :3] - center) ** 2).sum(axis=1)
        idx = np.flatnonzero(d2 <= radius * radius)
    if idx.size < min_points:
        raise InsufficientPointsError(
            f"ball at {center.tolist()} holds {idx.size} points (< {min_points})"
        )
    if idx.size == n:
        chosen = idx
    elif idx.size > n:
        chosen = idx[rng.choice(idx.size, size=n, replace=False)]
    else:
        extra = idx[rng.choice(idx.size, size=n - idx.size, replace=True)]
        chosen = np.concatenate([idx, extra])
    patch = cloud[chosen].astype(np.float32).copy()
    patch[:, :3] = (patch[:, :3] - center) / radius
    return patch


def bilinear_sample(image: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at continuous pixel coordinates with edge clamping;
    integer coordinates land exactly on pixels."""
    h, w = image.shape[:2]
    us = np.clip(us, 0.0, w - 1.0)
    vs = np.clip(vs, 0.0, h - 1.0)
    u0 = np.floor(us).astype(int)
    v0 = np.floor(vs).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (us - u0)[..., None]
    fv = (vs - v0)[..., None]
    top = image[v0, u0] * (1 - fu) + image[v0, u1] * fu
    bot = image[v1, u0] * (1 - fu) + image[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def window_side_px(radius: float, fx: float, depth: float) -> float:
    """Source window side so the crop covers the 3D ball's image footprint."""
    if depth <= 0:
        raise DataError("depth must be positive for a depth-scaled window")
    return 2.0 * radius * fx / depth


def grid_centers(extent: int, cells: int) -> np.ndarray:
    """Integer grid-center coordinates along one axis."""
    return np.floor((np.arange(cells) + 0.5) * extent / cells).astype(int)


def crop_patch(image: np.ndarray, u: int, v: int, size: int) -> np.ndarray:
    """Exact size x size pixel crop centered at (u, v), edge-replicated."""
    h, w = image.shape[:2]
    us = np.clip(np.arange(u - size // 2, u + size - size // 2), 0, w - 1)
    vs = np.clip(np.arange(v - size // 2, v + size - size // 2), 0, h - 1)
    return image[np.ix_(vs, us)]


def extract_2d_patch(
    image: np.ndarray,
    u: float,
    v: float,
    window_px: float,
    out_size: int = 64,
    min_coverage: float = 0.25,
) -> np.ndarray:
    """Bilinear crop of a window_px-wide square centered at (u, v), resampled
    to out_size x out_size. Rejects windows mostly outside the image."""
    h, w = image.shape[:2]
    if window_px <= 0:
        raise DataError(f"window must be positive, got {window_px}")
    half = window_px / 2.0
    x_ov = max(0.0, min(u + half, w - 0.5) - max(u - half, -0.5))
    y_ov = max(0.0, min(v + half, h - 0.5) - max(v - half, -0.5))
    coverage = (x_ov * y_ov) / (window_px * window_px)
    if coverage < min_coverage:
        raise PatchOutOfBoundsError(
            f"window at ({u:.1f}, {v:.1f}) side {window_px:.1f} covers "
            f"{coverage:.0%} of the image (< {min_coverage:.0%})"
        )
    step = window_px / out_size
    offsets = (np.arange(out_size) + 0.5 - out_size / 2.0) * step
    us = u + offsets[None, :]
    vs = v + offsets[:, None]
    patch = bilinear_sample(image, np.broadcast_to(us, (out_size, out_size)),
                            np.broadcast_to(vs, (out_size, out_size)))
    return np.clip(patch, 0.0, 1.0).astype(np.float32)
