"""Sparse-to-dense depth estimation.

Grid-sampled image patches are encoded with the 2D encoder and decoded with
the 3D decoder into local point clouds; each cloud is anchored along its
center pixel's back-projected ray at the least-squares depth offset that
fits the sparse samples inside the patch footprint (patches without interior
samples inherit an inverse-distance-weighted offset from their 4 nearest
anchored neighbors). The assembled cloud is z-buffered back onto the image
plane, holes within 5 px of valid pixels are filled from the nearest valid
neighbor, and standard REL / RMSE / threshold-ratio metrics compare the
result against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datagen.camera import CameraIntrinsics
from .datagen.patches import crop_patch, grid_centers
from .errors import DataError, ShapeError


@dataclass
class SparseDepth:
    samples: np.ndarray  # (S, 3) of (u, v, depth)
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
            raise ShapeError(f"samples must be a non-empty (S, 3) array, got {s.shape}")
        if (s[:, 2] <= 0).any():
            raise ValueError("sparse depths must be positive")
        if (
            (s[:, 0] < 0).any() or (s[:, 0] >= self.intrinsics.width).any()
            or (s[:, 1] < 0).any() or (s[:, 1] >= self.intrinsics.height).any()
        ):
            raise ValueError("sparse sample pixels must lie inside the image")
        self.samples = s


@dataclass
class DepthMetrics:
    rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self):
        if not (self.delta1 <= self.delta2 <= self.delta3):
            raise ValueError("threshold fractions must be nested")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("rel", "rmse", "delta1", "delta2", "delta3")}


def sample_sparse_depth(gt_depth: np.ndarray, intrinsics: CameraIntrinsics,
                        count: int = 2048, seed: int = 0) -> SparseDepth:
    """Uniform seeded draw of (u, v, depth) samples from valid gt pixels."""
    valid = np.argwhere(gt_depth > 0)
    if len(valid) == 0:
        raise DataError("ground-truth depth has no valid pixels")
    rng = np.random.default_rng(seed)
    pick = valid[rng.choice(len(valid), size=min(count, len(valid)), replace=False)]
    samples = np.stack(
        [pick[:, 1].astype(np.float64), pick[:, 0].astype(np.float64),
         gt_depth[pick[:, 0], pick[:, 1]].astype(np.float64)],
        axis=1,
    )
    return SparseDepth(samples=samples, intrinsics=intrinsics)


# -- patch grid -------------------------------------------------------------------


def patch_grid(image: np.ndarray, rows: int = 50, cols: int = 50,
               patch_size: int = 64):
    """rows x cols edge-replicated crops on a regular lattice; returns
    (patches (P, S, S, 3), centers (P, 2) as (u, v))."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if h < patch_size or w < patch_size:
        raise DataError(f"image {w}x{h} smaller than one {patch_size}px patch")
    us = grid_centers(w, cols)
    vs = grid_centers(h, rows)
    patches = np.empty((rows * cols, patch_size, patch_size, 3), dtype=np.float32)
    centers = np.empty((rows * cols, 2), dtype=np.int64)
    i = 0
    for v in vs:
        for u in us:
            patches[i] = crop_patch(image, int(u), int(v), patch_size)
            centers[i] = (u, v)
            i += 1
    return patches, centers


def decode_patch_cloud(patch: np.ndarray, model) -> np.ndarray:
    """Cross-domain route for one patch: decode_3d(encode_2d(patch))."""
    desc = model.encode_2d(patch)
    return model.decode_3d(desc.values)


def decode_patch_clouds(patches: np.ndarray, model, batch_size: int = 64) -> np.ndarray:
    """Batched decode_3d(encode_2d(.)); (P, S, S, 3) -> (P, N, 6)."""
    outs = []
    for i in range(0, len(patches), batch_size):
        desc, _ = model.encode_2d_batch(patches[i : i + batch_size], "eval")
        cloud, _ = model.decode_3d_batch(desc, "eval")
        outs.append(cloud)
    return np.concatenate(outs, axis=0)


class OracleLocalDecoder:
    """Bypasses the network: emits ground-truth local geometry around each
    patch center, isolating assembly + projection from learning quality."""

    def __init__(self, gt_depth: np.ndarray, image: np.ndarray,
                 intrinsics: CameraIntrinsics, radius: float = 0.30,
                 points: int = 1024, seed: int = 0):
        self.depth = np.asarray(gt_depth, dtype=np.float64)
        self.image = np.asarray(image, dtype=np.float64)
        self.intrinsics = intrinsics
        self.radius = radius
        self.points = points
        self.seed = seed

    def local_clouds(self, centers: np.ndarray, window: int = 64):
        """(kept_centers, clouds): normalized gt neighborhoods; centers whose
        window lacks valid depth are dropped."""
        k = self.intrinsics
        h, w = self.depth.shape
        clouds = []
        kept = []
        for ci, (u, v) in enumerate(centers):
            z = self.depth[min(max(int(v), 0), h - 1), min(max(int(u), 0), w - 1)]
            if z <= 0:
                continue
            anchor = np.array([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])
            u0, u1 = max(0, int(u) - window // 2), min(w, int(u) + window // 2)
            v0, v1 = max(0, int(v) - window // 2), min(h, int(v) + window // 2)
            uu, vv = np.meshgrid(np.arange(u0, u1), np.arange(v0, v1))
            zz = self.depth[vv, uu]
            ok = zz > 0
            pts = np.stack(
                [(uu[ok] - k.cx) / k.fx * zz[ok], (vv[ok] - k.cy) / k.fy * zz[ok], zz[ok]],
                axis=1,
            )
            col = self.image[vv[ok], uu[ok]]
            inside = np.linalg.norm(pts - anchor, axis=1) <= self.radius
            if inside.sum() < 8:
                continue
            pts, col = pts[inside], col[inside]
            rng = np.random.Generator(
                np.random.Philox(key=np.array([self.seed, ci], dtype=np.uint64))
            )
            if len(pts) >= self.points:
                sel = rng.choice(len(pts), size=self.points, replace=False)
            else:
                sel = np.concatenate(
                    [np.arange(len(pts)), rng.choice(len(pts), self.points - len(pts), replace=True)]
                )
            local = np.concatenate([(pts[sel] - anchor) / self.radius, col[sel]], axis=1)
            clouds.append(local.astype(np.float32))
            kept.append(ci)
        if not clouds:
            raise DataError("oracle decoder found no valid patch neighborhoods")
        return np.asarray(kept, dtype=int), np.stack(clouds)


# -- assembly ----------------------------------------------------------------------


def assemble(
    local_clouds: np.ndarray,
    centers: np.ndarray,
    sparse: SparseDepth,
    radius: float = 0.30,
    footprint_px: float = 64.0,
    fit_scale: bool = False,
) -> np.ndarray:
    """Anchor each local cloud on its center ray and merge into one cloud.

    Per patch, the depth offset minimizes the squared error against the
    sparse samples inside the patch's pixel footprint; with fit_scale a
    per-patch depth scale is solved jointly. Patches with no interior samples
    take the inverse-distance-weighted offset of the 4 nearest solved
    patches. Output is (P*N, 6) in the camera frame.
    """
    if len(local_clouds) != len(centers):
        raise ShapeError("one center per local cloud required")
    k = sparse.intrinsics
    s = sparse.samples
    half = footprint_px / 2.0
    offsets = np.full(len(centers), np.nan)
    scales = np.ones(len(centers))
    for p, (u, v) in enumerate(centers):
        inside = (np.abs(s[:, 0] - u) <= half) & (np.abs(s[:, 1] - v) <= half)
        if not inside.any():
            continue
        sam = s[inside]
        # sample lateral offsets (meters at the sample's own depth)
        dx = (sam[:, 0] - u) / k.fx * sam[:, 2]
        dy = (sam[:, 1] - v) / k.fy * sam[:, 2]
        lat = local_clouds[p][:, :2] * radius  # (N, 2) lateral coords
        d2 = (lat[None, :, 0] - dx[:, None]) ** 2 + (lat[None, :, 1] - dy[:, None]) ** 2
        nearest = d2.argmin(axis=1)
        zhat = local_clouds[p][nearest, 2] * radius
        if fit_scale and len(sam) >= 2 and np.ptp(zhat) > 1e-9:
            a = np.stack([np.ones_like(zhat), zhat], axis=1)
            sol, *_ = np.linalg.lstsq(a, sam[:, 2], rcond=None)
            offsets[p], scales[p] = sol[0], sol[1]
        else:
            offsets[p] = float(np.mean(sam[:, 2] - zhat))
    solved = np.flatnonzero(~np.isnan(offsets))
    if solved.size == 0:
        raise DataError("no patch footprint contains any sparse sample")
    empty = np.flatnonzero(np.isnan(offsets))
    for p in empty:
        d = np.linalg.norm(centers[solved] - centers[p], axis=1)
        nearest = solved[np.argsort(d)[:4]]
        w = 1.0 / (np.linalg.norm(centers[nearest] - centers[p], axis=1) + 1e-9)
        offsets[p] = float((offsets[nearest] * w).sum() / w.sum())
        scales[p] = float((scales[nearest] * w).sum() / w.sum())

    n = local_clouds.shape[1]
    out = np.empty((len(centers) * n, 6), dtype=np.float64)
    for p, (u, v) in enumerate(centers):
        d = offsets[p]
        anchor = np.array([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d])
        pts = local_clouds[p][:, :3] * radius
        pts = pts * np.array([1.0, 1.0, scales[p]])
        out[p * n : (p + 1) * n, :3] = anchor + pts
        out[p * n : (p + 1) * n, 3:] = local_clouds[p][:, 3:]
    return out


# -- projection --------------------------------------------------------------------


def project_depth(cloud: np.ndarray, intrinsics: CameraIntrinsics,
                  hole_radius_px: float = 5.0) -> np.ndarray:
    """Z-buffered projection of a camera-frame cloud to a dense depth map;
    holes within hole_radius_px of a valid pixel take the nearest valid
    depth, remaining holes stay 0 (invalid)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or len(cloud) == 0:
        raise DataError("project_depth needs a non-empty cloud")
    h, w = intrinsics.height, intrinsics.width
    z = cloud[:, 2]
    keep = z > 1e-6
    u = np.round(intrinsics.fx * cloud[keep, 0] / z[keep] + intrinsics.cx).astype(int)
    v = np.round(intrinsics.fy * cloud[keep, 1] / z[keep] + intrinsics.cy).astype(int)
    zz = z[keep]
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    depth = np.full((h, w), np.inf)
    np.minimum.at(depth, (v[inside], u[inside]), zz[inside])
    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)
    if valid.any() and not valid.all():
        dist, (iv, iu) = ndimage.distance_transform_edt(~valid, return_indices=True)
        fill = (dist > 0) & (dist <= hole_radius_px)
        depth[fill] = depth[iv[fill], iu[fill]]
    return depth.astype(np.float32)


# -- metrics -----------------------------------------------------------------------


def depth_metrics(pred: np.ndarray, gt: np.ndarray) -> DepthMetrics:
    """REL, RMSE and threshold-ratio fractions over pixels valid in both."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"resolution mismatch: {pred.shape} vs {gt.shape}")
    valid = (pred > 0) & (gt > 0)
    if not valid.any():
        raise DataError("no pixel is valid in both maps")
    p = pred[valid]
    g = gt[valid]
    rel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    ratio = np.maximum(p / g, g / p)
    d1, d2, d3 = (float(np.mean(ratio < 1.25**i)) for i in (1, 2, 3))
    return DepthMetrics(rel=rel, rmse=rmse, delta1=d1, delta2=d2, delta3=d3)


def constant_baseline_metrics(sparse: SparseDepth, gt: np.ndarray) -> DepthMetrics:
    """The trivial competitor: predict the mean sparse depth everywhere."""
    pred = np.full_like(np.asarray(gt, dtype=np.float64), float(sparse.samples[:, 2].mean()))
    return depth_metrics(pred, gt)


# -- end-to-end --------------------------------------------------------------------


def estimate_depth(
    image: np.ndarray,
    sparse: SparseDepth,
    model=None,
    oracle: OracleLocalDecoder | None = None,
    rows: int = 50,
    cols: int = 50,
    radius: float = 0.30,
    fit_scale: bool = False,
):
    """Full pipeline; pass a trained model or an oracle decoder.

    Returns (depth map, assembled cloud).
    """
    if (model is None) == (oracle is None):
        raise ValueError("provide exactly one of model, oracle")
    size = model.config.patch_size if model is not None else 64
    patches, centers = patch_grid(image, rows, cols, size)
    if model is not None:
        clouds = decode_patch_clouds(patches, model)
    else:
        kept, clouds = oracle.local_clouds(centers, window=size)
        centers = centers[kept]
    cloud = assemble(clouds, centers, sparse, radius=radius, footprint_px=size,
                     fit_scale=fit_scale)
    return project_depth(cloud, sparse.intrinsics), cloud
