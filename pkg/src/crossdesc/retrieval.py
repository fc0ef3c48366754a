"""2D-to-3D place recognition: VLAD aggregation of grid-sampled descriptors,
database search, and recall@N against pose ground truth.

Submaps contribute descriptors on a regular voxel grid (3D patches through
the point-set encoder); query images contribute descriptors on a regular
pixel grid (fixed-size crops through the image encoder). Both sides collapse
to one VLAD vector over a shared codebook.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .datagen.camera import Pose
from .datagen.patches import (
    InsufficientPointsError,
    crop_patch,
    extract_3d_patch,
    grid_centers,
)
from .errors import DataError, ShapeError
from .geomatch import rotation_angle_deg

INDEX_MAGIC = b"LCDV"
INDEX_VERSION = 1


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, D)
    seed: int
    reseeded: int = 0  # empty-cluster repair events during fitting

    def __post_init__(self):
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ShapeError(f"centroids must be (k, D), got {self.centroids.shape}")
        if not np.isfinite(self.centroids).all():
            raise ValueError("centroids must be finite")


@dataclass
class VladVector:
    values: np.ndarray  # (k*D,), unit norm unless degenerate
    degenerate: bool = False


@dataclass
class PlaceEntry:
    submap_id: str
    vlad: VladVector
    pose: Pose


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a**2).sum(1)[:, None] - 2.0 * (a @ b.T) + (b**2).sum(1)[None, :]
    return np.maximum(sq, 0.0)


# -- codebook ---------------------------------------------------------------------


def kmeans_fit(descriptors: np.ndarray, k: int = 64, seed: int = 0,
               max_iters: int = 50) -> Codebook:
    """Seeded farthest-point initialization, then Lloyd iterations to an
    assignment fixpoint (or max_iters). Deterministic given the seed."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"descriptors must be (M, D), got {x.shape}")
    if len(x) < k:
        raise DataError(f"need at least k={k} descriptors, got {len(x)}")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(len(x)))
    chosen = [first]
    min_d = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(min_d.argmax())
        chosen.append(nxt)
        min_d = np.minimum(min_d, ((x - x[nxt]) ** 2).sum(axis=1))
    centroids = x[chosen].copy()

    reseeded = 0
    assign = None
    for _ in range(max_iters):
        new_assign = _sq_dists(x, centroids).argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                # re-seed an emptied cluster at the point farthest from all centroids
                d = _sq_dists(x, centroids).min(axis=1)
                centroids[j] = x[int(d.argmax())]
                reseeded += 1
    return Codebook(centroids=centroids, seed=seed, reseeded=reseeded)


# -- VLAD ---------------------------------------------------------------------------


def vlad_aggregate(descriptors: np.ndarray, codebook: Codebook) -> VladVector:
    """Residual sums per nearest centroid (ties to the lowest index), with
    per-centroid intra-normalization then global L2 normalization."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DataError(f"need a non-empty (M, D) descriptor set, got {x.shape}")
    k, d = codebook.centroids.shape
    if x.shape[1] != d:
        raise ShapeError(f"descriptor dim {x.shape[1]} != codebook dim {d}")
    assign = _sq_dists(x, codebook.centroids).argmin(axis=1)
    blocks = np.zeros((k, d))
    for j in range(k):
        members = x[assign == j]
        if len(members):
            blocks[j] = (members - codebook.centroids[j]).sum(axis=0)
    norms = np.linalg.norm(blocks, axis=1)
    nonzero = norms > 0
    blocks[nonzero] /= norms[nonzero, None]
    flat = blocks.ravel()
    total = np.linalg.norm(flat)
    if total == 0.0:
        return VladVector(values=flat.astype(np.float32), degenerate=True)
    return VladVector(values=(flat / total).astype(np.float32), degenerate=False)


# -- descriptor sampling ----------------------------------------------------------------


def occupied_cells(points: np.ndarray, grid: float) -> np.ndarray:
    """Sorted unique voxel coordinates of the occupied cells."""
    cells = np.floor(np.asarray(points)[:, :3] / grid).astype(np.int64)
    uniq = np.unique(cells, axis=0)
    order = np.lexsort((uniq[:, 2], uniq[:, 1], uniq[:, 0]))
    return uniq[order]


def sample_submap_descriptors(
    cloud: np.ndarray,
    model,
    grid: float = 0.5,
    radius: float = 0.30,
    min_points: int = 8,
    seed: int = 0,
    batch_size: int = 64,
):
    """One encoded 3D patch per occupied voxel cell center; cells whose ball
    holds fewer than min_points points are skipped. Returns (descriptors,
    cell centers)."""
    cloud = np.asarray(cloud, dtype=np.float32)
    if cloud.ndim != 2 or cloud.shape[1] != 6 or len(cloud) == 0:
        raise DataError(f"submap cloud must be (M, 6), got {cloud.shape}")
    cells = occupied_cells(cloud, grid)
    tree = cKDTree(cloud[:, :3].astype(np.float64))
    n = model.config.points_per_patch
    patches = []
    centers = []
    for ci, cell in enumerate(cells):
        center = (cell + 0.5) * grid
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, ci], dtype=np.uint64)))
        try:
            patch = extract_3d_patch(cloud, center, radius, n, rng, tree=tree,
                                     min_points=min_points)
        except InsufficientPointsError:
            continue
        patches.append(patch)
        centers.append(center)
    if not patches:
        raise DataError("no grid cell held enough points for a descriptor")
    stack = np.stack(patches)
    descs = [
        model.encode_3d_batch(stack[i : i + batch_size], "eval")[0]
        for i in range(0, len(stack), batch_size)
    ]
    return np.concatenate(descs, axis=0), np.asarray(centers)


def sample_image_descriptors(image: np.ndarray, model, grid_rows: int = 8,
                             grid_cols: int = 8, batch_size: int = 64):
    """Encoded fixed-size crops centered on a regular pixel grid; returns
    (descriptors, (u, v) centers)."""
    image = np.asarray(image, dtype=np.float32)
    size = model.config.patch_size
    h, w = image.shape[:2]
    if h < size or w < size:
        raise DataError(f"image {w}x{h} smaller than one {size}px patch")
    us = grid_centers(w, grid_cols)
    vs = grid_centers(h, grid_rows)
    patches = []
    centers = []
    for v in vs:
        for u in us:
            patches.append(crop_patch(image, int(u), int(v), size))
            centers.append((int(u), int(v)))
    stack = np.stack(patches)
    descs = [
        model.encode_2d_batch(stack[i : i + batch_size], "eval")[0]
        for i in range(0, len(stack), batch_size)
    ]
    return np.concatenate(descs, axis=0), np.asarray(centers)


# -- oracle descriptors (pose-consistent sanity mode) --------------------------------------


class OraclePositionEncoder:
    """Network-free descriptors derived from world position alone: smooth
    sinusoid features, so spatially close patches get close descriptors.

    Used to exercise the retrieval machinery (codebook, VLAD, ranking,
    recall) independently of any trained model.
    """

    def __init__(self, dim: int = 32, seed: int = 12345, length_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(dim, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        freqs = rng.uniform(0.4, 2.2, size=(dim, 1)) / length_scale
        self.proj = dirs * freqs
        self.phase = rng.uniform(0, 2 * np.pi, size=dim)

    def encode(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.sin(points @ self.proj.T + self.phase).astype(np.float32)


# -- search and evaluation ---------------------------------------------------------------------


def query(db: list[PlaceEntry], q: VladVector, n: int) -> list[tuple[str, float]]:
    """Top-n submap ids by ascending Euclidean distance, ties by id."""
    if not db:
        raise DataError("empty place database")
    if n < 1:
        raise ValueError("n must be >= 1")
    dists = [
        (float(np.linalg.norm(e.vlad.values.astype(np.float64)
                              - q.values.astype(np.float64))), e.submap_id)
        for e in db
    ]
    dists.sort(key=lambda t: (t[0], t[1]))
    return [(sid, d) for d, sid in dists[:n]]


def pose_within(query_pose: Pose, entry_pose: Pose, d_max: float = 0.5,
                theta_max_deg: float = 30.0) -> bool:
    """Inclusive camera-center distance and geodesic angle thresholds.

    The angle test runs in cosine space (angle <= theta iff cos(angle) >=
    cos(theta) on [0, 180]) so the inclusive boundary is not blurred by an
    arccos round-trip.
    """
    dist = float(np.linalg.norm(query_pose.camera_center() - entry_pose.camera_center()))
    rel = query_pose.rotation @ entry_pose.rotation.T
    cos_angle = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return dist <= d_max and cos_angle >= np.cos(np.deg2rad(theta_max_deg))


def recall_at_n(
    rankings: list[list[str]],
    query_poses: list[Pose | None],
    entry_poses: dict[str, Pose],
    ns: list[int],
    d_max: float = 0.5,
    theta_max_deg: float = 30.0,
):
    """recall@N over queries: a query counts correct at N iff any of its
    top-N submaps lies within (d_max, theta_max) of its ground-truth pose.

    Queries without a pose are excluded and counted in the report.
    """
    if len(rankings) != len(query_poses):
        raise ShapeError("one ranking per query pose required")
    ns = sorted(ns)
    counted = 0
    correct = {n: 0 for n in ns}
    excluded = 0
    for ranked, qpose in zip(rankings, query_poses):
        if qpose is None:
            excluded += 1
            continue
        counted += 1
        hits = [pose_within(qpose, entry_poses[sid], d_max, theta_max_deg) for sid in ranked]
        for n in ns:
            if any(hits[:n]):
                correct[n] += 1
    if counted == 0:
        raise DataError("no query carries a ground-truth pose")
    recall = {n: correct[n] / counted for n in ns}
    return {"recall": recall, "queries": counted, "excluded": excluded}


# -- index file -------------------------------------------------------------------------------


def save_index(path, codebook: Codebook, entries: list[PlaceEntry]) -> None:
    k, d = codebook.centroids.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, k, d))
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(entries)))
        for e in entries:
            sid = e.submap_id.encode("utf-8")
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(np.ascontiguousarray(e.pose.rotation, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(e.pose.translation, dtype="<f8").tobytes())
            fh.write(struct.pack("<B", int(e.vlad.degenerate)))
            fh.write(np.ascontiguousarray(e.vlad.values, dtype="<f4").tobytes())


def load_index(path):
    with open(path, "rb") as fh:
        if fh.read(4) != INDEX_MAGIC:
            raise DataError(f"bad index magic in {path}")
        version, k, d = struct.unpack("<III", fh.read(12))
        if version != INDEX_VERSION:
            raise DataError(f"unsupported index version {version}")
        centroids = np.frombuffer(fh.read(4 * k * d), dtype="<f4").astype(np.float64)
        codebook = Codebook(centroids=centroids.reshape(k, d), seed=0)
        (count,) = struct.unpack("<I", fh.read(4))
        entries = []
        for _ in range(count):
            (slen,) = struct.unpack("<H", fh.read(2))
            sid = fh.read(slen).decode("utf-8")
            rot = np.frombuffer(fh.read(72), dtype="<f8").reshape(3, 3)
            t = np.frombuffer(fh.read(24), dtype="<f8")
            (degenerate,) = struct.unpack("<B", fh.read(1))
            values = np.frombuffer(fh.read(4 * k * d), dtype="<f4").copy()
            entries.append(
                PlaceEntry(sid, VladVector(values, bool(degenerate)), Pose(rot, t))
            )
    return codebook, entries
