"""Training objective: photometric MSE, Chamfer distance, triplet loss with
online batch-hardest negative mining, and their weighted combination.

The Chamfer term is the max of the two directed mean-min Euclidean distances,
computed in the full 6-D point space (coordinates + colors) by default.
The triplet distance function is Euclidean distance on raw embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError

_DIST_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    distance: str = "euclidean"
    mining_direction: str = "symmetric"  # "2d_anchor" | "3d_anchor" | "symmetric"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.distance != "euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")
        if self.mining_direction not in ("2d_anchor", "3d_anchor", "symmetric"):
            raise ValueError(f"unknown mining direction {self.mining_direction!r}")


class TripletIndices(NamedTuple):
    anchor_domain: str  # "2d" or "3d"
    anchor: int
    positive: int
    negative: int


# -- photometric loss ------------------------------------------------------------


def photometric_loss(image: np.ndarray, recon: np.ndarray) -> float:
    """Mean over pixels of the squared channel difference norm."""
    image = np.asarray(image, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if image.shape != recon.shape:
        raise ShapeError(f"patch shapes differ: {image.shape} vs {recon.shape}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (W, H, 3) patches, got {image.shape}")
    n_pixels = image.shape[0] * image.shape[1]
    return float(((image - recon) ** 2).sum() / n_pixels)


def photometric_batch(images: np.ndarray, recons: np.ndarray):
    """Batch-mean photometric loss and its gradient w.r.t. the reconstructions."""
    if images.shape != recons.shape:
        raise ShapeError(f"batch shapes differ: {images.shape} vs {recons.shape}")
    b, h, w, _ = images.shape
    diff = recons.astype(np.float64) - images.astype(np.float64)
    loss = float((diff**2).sum() / (h * w) / b)
    grad = (2.0 / (h * w) / b) * diff
    return loss, grad.astype(recons.dtype)


# -- Chamfer loss ------------------------------------------------------------------


def _cross_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (|a| x |b|) via the matmul expansion."""
    sq = (a**2).sum(axis=1)[:, None] - 2.0 * (a @ b.T) + (b**2).sum(axis=1)[None, :]
    return np.maximum(sq, 0.0)


def chamfer_loss(points: np.ndarray, recon: np.ndarray, coords_only: bool = False) -> float:
    """Max of the two directed mean nearest-neighbor distances.

    Operates in the full 6-D space; coords_only restricts to xyz for the
    geometry-only ablation.
    """
    p = np.asarray(points, dtype=np.float64)
    q = np.asarray(recon, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ShapeError(f"point sets must share the feature dim: {p.shape} vs {q.shape}")
    if p.shape[1] != 6:
        raise ShapeError(f"points must be 6-dimensional, got {p.shape[1]}")
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("chamfer_loss rejects empty point sets")
    if coords_only:
        p, q = p[:, :3], q[:, :3]
    # argmin via the matmul expansion, then exact distances at the argmins
    # (the expansion's cancellation error would turn coincident points into
    # small positive distances); sorted summation makes the result exactly
    # invariant to row permutations of either set
    sq = _cross_sq_dists(p, q)
    d_pq = np.linalg.norm(p - q[sq.argmin(axis=1)], axis=1)
    d_qp = np.linalg.norm(p[sq.argmin(axis=0)] - q, axis=1)
    term_pq = np.sort(d_pq).sum() / len(p)
    term_qp = np.sort(d_qp).sum() / len(q)
    return float(max(term_pq, term_qp))


def chamfer_batch(points: np.ndarray, recons: np.ndarray, coords_only: bool = False):
    """Batch-mean Chamfer loss and gradient w.r.t. the reconstructions.

    The gradient flows through the larger directed term of each pair (the
    first term on exact ties) and through the nearest-neighbor assignments;
    coincident nearest neighbors contribute zero gradient.
    """
    if points.shape[0] != recons.shape[0]:
        raise ShapeError(f"batch sizes differ: {points.shape[0]} vs {recons.shape[0]}")
    b = points.shape[0]
    dim = 3 if coords_only else 6
    loss = 0.0
    grad = np.zeros_like(recons)
    for i in range(b):
        p = points[i, :, :dim].astype(np.float64)
        q = recons[i, :, :dim].astype(np.float64)
        sq = _cross_sq_dists(p, q)  # argmin on squared = argmin on distances
        nn_pq = sq.argmin(axis=1)  # for each p: nearest q
        nn_qp = sq.argmin(axis=0)  # for each q: nearest p
        dist_pq = np.linalg.norm(p - q[nn_pq], axis=1)
        dist_qp = np.linalg.norm(p[nn_qp] - q, axis=1)
        term_pq = dist_pq.mean()
        term_qp = dist_qp.mean()
        contrib = np.zeros_like(q)
        if term_pq >= term_qp:
            loss += term_pq
            safe = dist_pq > _DIST_EPS
            # d term/d q_j accumulates -(p_i - q_j)/dist over i with nn(i) = j
            deltas = (q[nn_pq[safe]] - p[safe]) / dist_pq[safe, None]
            np.add.at(contrib, nn_pq[safe], deltas / len(p))
        else:
            loss += term_qp
            safe = dist_qp > _DIST_EPS
            contrib[safe] = (q[safe] - p[nn_qp[safe]]) / dist_qp[safe, None] / len(q)
        grad[i, :, :dim] += contrib.astype(recons.dtype)
    return float(loss / b), grad / b


# -- triplet loss -------------------------------------------------------------------


def triplet_loss(d_a: np.ndarray, d_p: np.ndarray, d_n: np.ndarray,
                 cfg: TripletConfig) -> float:
    """max(F(a, p) - F(a, n) + margin, 0) with Euclidean F."""
    d_a, d_p, d_n = (np.asarray(v, dtype=np.float64) for v in (d_a, d_p, d_n))
    if not (d_a.shape == d_p.shape == d_n.shape):
        raise ShapeError(
            f"descriptor dims differ: {d_a.shape}, {d_p.shape}, {d_n.shape}"
        )
    pos = np.linalg.norm(d_a - d_p)
    neg = np.linalg.norm(d_a - d_n)
    return float(max(pos - neg + cfg.margin, 0.0))


def mine_hardest_negatives(d2d: np.ndarray, d3d: np.ndarray,
                           cfg: TripletConfig) -> list[TripletIndices]:
    """Per anchor, the aligned counterpart is the positive and the closest
    non-matching counterpart is the negative; ties go to the lowest index."""
    d2d = np.asarray(d2d)
    d3d = np.asarray(d3d)
    if d2d.shape != d3d.shape:
        raise ShapeError(f"descriptor batches differ: {d2d.shape} vs {d3d.shape}")
    b = d2d.shape[0]
    if b < 2:
        raise ValueError("mining needs a batch of at least 2 pairs")
    d = np.sqrt(_cross_sq_dists(d2d.astype(np.float64), d3d.astype(np.float64)))
    triplets: list[TripletIndices] = []
    if cfg.mining_direction in ("2d_anchor", "symmetric"):
        masked = d.copy()
        np.fill_diagonal(masked, np.inf)
        negs = masked.argmin(axis=1)
        triplets += [TripletIndices("2d", i, i, int(negs[i])) for i in range(b)]
    if cfg.mining_direction in ("3d_anchor", "symmetric"):
        masked = d.T.copy()
        np.fill_diagonal(masked, np.inf)
        negs = masked.argmin(axis=1)
        triplets += [TripletIndices("3d", i, i, int(negs[i])) for i in range(b)]
    return triplets


def triplet_batch(d2d: np.ndarray, d3d: np.ndarray, cfg: TripletConfig):
    """Mean hinge loss over mined triplets plus gradients w.r.t. both batches.

    The mining choice is discrete and carries no gradient; active triplets
    propagate unit-vector gradients through the two distances.
    """
    triplets = mine_hardest_negatives(d2d, d3d, cfg)
    g2d = np.zeros_like(d2d)
    g3d = np.zeros_like(d3d)
    total = 0.0
    for t in triplets:
        if t.anchor_domain == "2d":
            a, ga = d2d[t.anchor], g2d
            p, n = d3d[t.positive], d3d[t.negative]
            gother = g3d
        else:
            a, ga = d3d[t.anchor], g3d
            p, n = d2d[t.positive], d2d[t.negative]
            gother = g2d
        dp = a - p
        dn = a - n
        pos = np.linalg.norm(dp)
        neg = np.linalg.norm(dn)
        hinge = pos - neg + cfg.margin
        if hinge <= 0:
            continue
        total += hinge
        upos = dp / max(pos, _DIST_EPS)
        uneg = dn / max(neg, _DIST_EPS)
        ga[t.anchor] += (upos - uneg).astype(d2d.dtype)
        gother[t.positive] -= upos.astype(d2d.dtype)
        gother[t.negative] += uneg.astype(d2d.dtype)
    count = len(triplets)
    return float(total / count), g2d / count, g3d / count, triplets


# -- combined objective ----------------------------------------------------------------


def combined_loss(model, images: np.ndarray, points: np.ndarray,
                  weights: LossWeights, cfg: TripletConfig, mode: str = "train",
                  coords_only_chamfer: bool = False):
    """Weighted sum of the three terms over an aligned batch, with gradients
    accumulated into the model's parameter store.

    Returns (total, parts) where parts maps term name -> batch-mean value.
    All-zero weights produce a zero loss and zero gradients.
    """
    if images.shape[0] != points.shape[0]:
        raise ShapeError(f"batch sizes differ: {images.shape[0]} vs {points.shape[0]}")
    if images.shape[0] < 2:
        raise ValueError("combined loss needs a batch of at least 2 pairs")

    d2d, enc2d_cache = model.encode_2d_batch(images, mode)
    d3d, enc3d_cache = model.encode_3d_batch(points, mode)
    recon2d, dec2d_cache = model.decode_2d_batch(d2d, mode)
    recon3d, dec3d_cache = model.decode_3d_batch(d3d, mode)

    mse, g_recon2d = photometric_batch(images, recon2d)
    chamfer, g_recon3d = chamfer_batch(points, recon3d, coords_only_chamfer)
    triplet, g2d_trip, g3d_trip, _ = triplet_batch(d2d, d3d, cfg)
    total = weights.alpha * mse + weights.beta * chamfer + weights.gamma * triplet

    g_desc2d = weights.gamma * g2d_trip
    g_desc3d = weights.gamma * g3d_trip
    if weights.alpha != 0.0:
        g_desc2d = g_desc2d + model.backward_2d_decoder(dec2d_cache, weights.alpha * g_recon2d)
    if weights.beta != 0.0:
        g_desc3d = g_desc3d + model.backward_3d_decoder(dec3d_cache, weights.beta * g_recon3d)
    if np.any(g_desc2d):
        model.backward_2d_encoder(enc2d_cache, g_desc2d)
    if np.any(g_desc3d):
        model.backward_3d_encoder(enc3d_cache, g_desc3d)

    parts = {"mse": mse, "chamfer": chamfer, "triplet": triplet, "total": total}
    return total, parts
