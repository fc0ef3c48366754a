"""Descriptor matching and rigid registration.

Nearest-neighbor matching is an exhaustive Euclidean scan (the reference
path); registration runs RANSAC over 3-sample Kabsch hypotheses with a
counter-based per-hypothesis RNG, then refines on the inlier set. A
registration is judged correct by the strict RMSE rule (rmse^2 < tau^2 over
ground-truth correspondences) plus an overlap-ratio criterion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, NumericalError, ShapeError


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError("not a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic rotation angle of a rotation matrix, degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass
class RegistrationEval:
    gt_correspondences: np.ndarray  # (K, 6): src xyz, dst xyz
    gt_transform: RigidTransform
    tau: float = 0.2
    overlap_threshold: float = 0.30
    overlap_radius: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not (0 < self.overlap_threshold <= 1):
            raise ValueError("overlap_threshold must lie in (0, 1]")


# -- nearest-neighbor matching -----------------------------------------------------


def match_nn(desc_a: np.ndarray, desc_b: np.ndarray) -> list[Match]:
    """For every row of desc_a, the closest row of desc_b (exhaustive scan,
    ties to the lowest index)."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"descriptor dims differ: {a.shape} vs {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise DataError("match_nn needs non-empty descriptor sets")
    sq = (a**2).sum(1)[:, None] - 2.0 * (a @ b.T) + (b**2).sum(1)[None, :]
    np.maximum(sq, 0.0, out=sq)
    idx = sq.argmin(axis=1)
    dist = np.linalg.norm(a - b[idx], axis=1)
    return [Match(i, int(idx[i]), float(dist[i])) for i in range(len(a))]


def matching_precision(matches: list[Match], gt_pixels_b: np.ndarray,
                       matched_pixels_b: np.ndarray, pixel_tolerance: float = 4.0):
    """Fraction of matches whose matched keypoint lies within pixel_tolerance
    of the ground-truth reprojection.

    gt_pixels_b[i] is the ground-truth pixel in image B for match i (NaN when
    no ground truth exists; those matches are excluded). Returns None when no
    match has ground truth (undefined precision, distinct from 0).
    """
    gt = np.asarray(gt_pixels_b, dtype=np.float64)
    px = np.asarray(matched_pixels_b, dtype=np.float64)
    if len(gt) != len(matches) or len(px) != len(matches):
        raise ShapeError("one ground-truth and one matched pixel required per match")
    valid = ~np.isnan(gt).any(axis=1)
    if not valid.any():
        return None
    err = np.linalg.norm(px[valid] - gt[valid], axis=1)
    return float((err <= pixel_tolerance).mean())


# -- keypoints ------------------------------------------------------------------------


def downsample_keypoints(cloud: np.ndarray, voxel_size: float) -> np.ndarray:
    """One keypoint per occupied voxel: the point nearest the voxel center.

    Returns indices into the cloud, sorted by voxel grid coordinates, so the
    result is deterministic and order-independent.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(cloud)[:, :3].astype(np.float64)
    if len(pts) == 0:
        raise DataError("empty cloud")
    cells = np.floor(pts / voxel_size).astype(np.int64)
    centers = (cells + 0.5) * voxel_size
    d2 = ((pts - centers) ** 2).sum(axis=1)
    best: dict[tuple, tuple[float, int]] = {}
    for i in range(len(pts)):
        key = tuple(cells[i])
        cur = best.get(key)
        if cur is None or d2[i] < cur[0]:
            best[key] = (d2[i], i)
    return np.array([best[k][1] for k in sorted(best)], dtype=int)


# -- rigid fitting -----------------------------------------------------------------------


def kabsch_fit(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform T with T(src) ~ dst; det(R) = +1 enforced."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"paired (K, 3) arrays required, got {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DataError(f"need >= 3 pairs, got {len(src)}")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise NumericalError(
            f"degenerate (collinear) correspondences: singular values {s.tolist()}"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    return RigidTransform(r, t)


def _hypothesis_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


@dataclass
class RansacResult:
    success: bool
    transform: RigidTransform | None
    inliers: np.ndarray  # indices into the (sorted) match list
    inlier_rmse: float
    iterations: int


def ransac_register(
    src_kps: np.ndarray,
    dst_kps: np.ndarray,
    matches: list[Match],
    iterations: int = 10000,
    inlier_threshold: float = 0.05,
    seed: int = 0,
) -> RansacResult:
    """Best-by-inlier-count 3-sample Kabsch hypothesis, refined on inliers.

    Matches are canonically sorted before sampling and every hypothesis draws
    from its own counter-based RNG, so the result is independent of match
    order and of any parallel evaluation schedule. Ties in inlier count break
    toward lower inlier RMSE.
    """
    if len(matches) < 3:
        raise DataError(f"need >= 3 matches, got {len(matches)}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    order = sorted(range(len(matches)), key=lambda i: (matches[i].index_a, matches[i].index_b))
    src = np.asarray(src_kps, dtype=np.float64)[[matches[i].index_a for i in order]]
    dst = np.asarray(dst_kps, dtype=np.float64)[[matches[i].index_b for i in order]]

    best_count = 0
    best_rmse = np.inf
    best_mask = None
    for it in range(iterations):
        rng = _hypothesis_rng(seed, it)
        pick = rng.choice(len(src), size=3, replace=False)
        try:
            t = kabsch_fit(src[pick], dst[pick])
        except NumericalError:
            continue
        res = np.linalg.norm(t.apply(src) - dst, axis=1)
        mask = res <= inlier_threshold
        count = int(mask.sum())
        if count < 3:
            continue
        rmse = float(np.sqrt((res[mask] ** 2).mean()))
        if count > best_count or (count == best_count and rmse < best_rmse):
            best_count, best_rmse, best_mask = count, rmse, mask
    if best_mask is None:
        return RansacResult(False, None, np.zeros(0, dtype=int), np.inf, iterations)
    refined = kabsch_fit(src[best_mask], dst[best_mask])
    res = np.linalg.norm(refined.apply(src) - dst, axis=1)
    mask = res <= inlier_threshold
    if mask.sum() >= 3:
        refined = kabsch_fit(src[mask], dst[mask])
        res = np.linalg.norm(refined.apply(src) - dst, axis=1)
        mask = res <= inlier_threshold
    rmse = float(np.sqrt((res[mask] ** 2).mean())) if mask.any() else np.inf
    return RansacResult(True, refined, np.flatnonzero(mask), rmse, iterations)


# -- registration evaluation -----------------------------------------------------------------


def correspondence_rmse(t: RigidTransform, pairs: np.ndarray) -> float:
    """sqrt of the mean squared correspondence error under t."""
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 6 or len(pairs) == 0:
        raise DataError(f"correspondences must be a non-empty (K, 6) array, got {pairs.shape}")
    err = t.apply(pairs[:, :3]) - pairs[:, 3:]
    return float(np.sqrt((err**2).sum(axis=1).mean()))


def overlap_ratio(t: RigidTransform, src_points: np.ndarray, dst_points: np.ndarray,
                  radius: float = 0.05) -> float:
    """Fraction of transformed src points with a dst neighbor within radius."""
    moved = t.apply(np.asarray(src_points, dtype=np.float64)[:, :3])
    tree = cKDTree(np.asarray(dst_points, dtype=np.float64)[:, :3])
    dist, _ = tree.query(moved, k=1)
    return float((dist <= radius).mean())


def registration_correct(
    t: RigidTransform,
    ev: RegistrationEval,
    src_points: np.ndarray | None = None,
    dst_points: np.ndarray | None = None,
):
    """(correct, rmse): rmse^2 < tau^2 (strict) and, when the fragments are
    provided, overlap of t(src) against dst >= overlap_threshold."""
    rmse = correspondence_rmse(t, ev.gt_correspondences)
    correct = rmse**2 < ev.tau**2
    if correct and src_points is not None and dst_points is not None:
        correct = overlap_ratio(t, src_points, dst_points, ev.overlap_radius) >= ev.overlap_threshold
    return bool(correct), rmse


def registration_recall(results: list[tuple[RigidTransform | None, RegistrationEval,
                                            np.ndarray, np.ndarray]]):
    """Fraction of fragment pairs judged correct; returns (recall, reports).

    Each item is (estimated transform or None, eval record, src, dst); a
    failed estimate counts as incorrect.
    """
    if not results:
        raise DataError("no fragment pairs to evaluate")
    reports = []
    n_correct = 0
    for i, (t, ev, src, dst) in enumerate(results):
        if t is None:
            reports.append({"pair": i, "correct": False, "rmse": None, "failure": True})
            continue
        ok, rmse = registration_correct(t, ev, src, dst)
        n_correct += int(ok)
        reports.append({"pair": i, "correct": bool(ok), "rmse": rmse, "failure": False})
    return n_correct / len(results), reports
