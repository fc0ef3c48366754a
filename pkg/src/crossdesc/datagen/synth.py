"""Analytic scene generator: textured primitives, exact ray-cast depth maps,
seeded surface sampling, and orbit trajectories.

Every quantity is closed-form, so rendered depth can be checked against
ray-primitive intersections to machine precision and the fused cloud carries
exact ground truth for correspondence generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from .camera import CameraIntrinsics, Pose, RgbdFrame, look_at

_T_MIN = 1e-9


# -- procedural textures ---------------------------------------------------------


class Texture:
    """Smooth multi-sinusoid color field over (a, b) in [0,1]^2, or a
    two-color checkerboard."""

    def __init__(self, kind: str = "sine", seed: int = 0, squares: int = 8,
                 components: int = 6):
        self.kind = kind
        self.squares = squares
        rng = np.random.default_rng(seed)
        self.base = rng.uniform(0.25, 0.75, size=3)
        self.freq = rng.uniform(0.5, 6.0, size=(components, 2))
        self.phase = rng.uniform(0.0, 2 * np.pi, size=components)
        self.amp = rng.uniform(0.05, 0.22, size=(components, 1)) * rng.uniform(
            -1.0, 1.0, size=(components, 3)
        )
        self.colors = rng.uniform(0.1, 0.9, size=(2, 3))

    def sample(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if self.kind == "checker":
            cell = (np.floor(a * self.squares) + np.floor(b * self.squares)).astype(int) % 2
            return self.colors[cell]
        waves = np.zeros(a.shape + (3,))
        for i in range(len(self.phase)):
            s = np.sin(2 * np.pi * (self.freq[i, 0] * a + self.freq[i, 1] * b) + self.phase[i])
            waves += s[..., None] * self.amp[i]
        return np.clip(self.base + waves, 0.0, 1.0)


# -- primitives -------------------------------------------------------------------


@dataclass
class Rectangle:
    """Finite textured parallelogram: origin corner plus two edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    texture: Texture

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.float64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.float64)
        n = np.cross(self.edge_u, self.edge_v)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise DataError("degenerate rectangle (parallel edges)")
        self.normal = n / norm

    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    def ray_hits(self, origins: np.ndarray, dirs: np.ndarray):
        """Vectorized intersection; returns (t, color) with t = inf on miss."""
        denom = dirs @ self.normal
        safe = np.abs(denom) > 1e-12
        t = np.where(safe, ((self.origin - origins) @ self.normal) / np.where(safe, denom, 1.0), np.inf)
        pts = origins + t[..., None] * dirs
        rel = pts - self.origin
        uu = self.edge_u @ self.edge_u
        vv = self.edge_v @ self.edge_v
        uv = self.edge_u @ self.edge_v
        ru = rel @ self.edge_u
        rv = rel @ self.edge_v
        det = uu * vv - uv * uv
        a = (ru * vv - rv * uv) / det
        b = (rv * uu - ru * uv) / det
        inside = (t > _T_MIN) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        t = np.where(inside, t, np.inf)
        color = self.texture.sample(np.clip(a, 0, 1), np.clip(b, 0, 1))
        return t, color

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        a = rng.uniform(0, 1, n)
        b = rng.uniform(0, 1, n)
        pts = self.origin + a[:, None] * self.edge_u + b[:, None] * self.edge_v
        return np.concatenate([pts, self.texture.sample(a, b)], axis=1)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise DataError("sphere radius must be positive")

    def area(self) -> float:
        return float(4 * np.pi * self.radius**2)

    def _params(self, pts: np.ndarray):
        rel = (pts - self.center) / self.radius
        z = np.clip(rel[..., 2], -1.0, 1.0)
        theta = np.arccos(z) / np.pi
        phi = (np.arctan2(rel[..., 1], rel[..., 0]) + np.pi) / (2 * np.pi)
        return phi, theta

    def ray_hits(self, origins: np.ndarray, dirs: np.ndarray):
        oc = origins - self.center
        a = (dirs * dirs).sum(-1)
        b = 2.0 * (oc * dirs).sum(-1)
        c = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _T_MIN, t0, t1)
        t = np.where(hit & (t > _T_MIN), t, np.inf)
        pts = origins + t[..., None] * dirs
        phi, theta = self._params(pts)
        return t, self.texture.sample(phi, theta)

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        vec = rng.normal(size=(n, 3))
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        pts = self.center + self.radius * vec
        phi, theta = self._params(pts)
        return np.concatenate([pts, self.texture.sample(phi, theta)], axis=1)


def box_faces(lo, hi, seed: int) -> list[Rectangle]:
    """An axis-aligned box as six textured rectangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not (hi > lo).all():
        raise DataError("box needs hi > lo on every axis")
    d = hi - lo
    ex = np.array([d[0], 0, 0])
    ey = np.array([0, d[1], 0])
    ez = np.array([0, 0, d[2]])
    corners = [
        (lo, ey, ez), (lo + ex, ey, ez),           # x faces
        (lo, ex, ez), (lo + ey, ex, ez),           # y faces
        (lo, ex, ey), (lo + ez, ex, ey),           # z faces
    ]
    return [
        Rectangle(o, u, v, Texture(seed=seed * 13 + i)) for i, (o, u, v) in enumerate(corners)
    ]


# -- scene spec -------------------------------------------------------------------


@dataclass
class SynthScene:
    frames: list[RgbdFrame]
    cloud: np.ndarray  # (M, 6)
    poses: list[Pose]
    primitives: list


def plane_scene_spec(z: float = 2.0, half_extent: float = 3.0, frames: int = 1,
                     texture: str = "sine", resolution=(96, 128)) -> dict:
    """A single fronto-parallel textured plane viewed from the origin.

    The default extent covers the whole frustum at z (constant depth maps);
    pass half_extent <= ~0.6*z to keep the plane fully inside the view.
    """
    return {
        "intrinsics": {
            "fx": 120.0, "fy": 120.0, "cx": resolution[1] / 2.0, "cy": resolution[0] / 2.0,
            "width": resolution[1], "height": resolution[0],
        },
        "primitives": [
            {
                "kind": "rectangle",
                "origin": [-half_extent, -half_extent, z],
                "edge_u": [2 * half_extent, 0.0, 0.0],
                "edge_v": [0.0, 2 * half_extent, 0.0],
                "texture": texture,
            }
        ],
        "trajectory": {
            "kind": "explicit",
            "poses": [np.eye(4).reshape(-1).tolist()] * frames,
        },
        "cloud_points": 40000,
    }


def default_scene_spec(n_frames: int = 24, cloud_points: int = 90000) -> dict:
    """The desk-scale room: floor, two walls, boxes, and spheres, orbited by
    the camera at roughly 1.5 m so a 0.3 m ball covers about 64 px."""
    e = 2.4  # room half extent
    return {
        "intrinsics": {
            "fx": 160.0, "fy": 160.0, "cx": 96.0, "cy": 72.0, "width": 192, "height": 144,
        },
        "primitives": [
            {"kind": "rectangle", "origin": [-e, -e, 0.0], "edge_u": [2 * e, 0, 0],
             "edge_v": [0, 2 * e, 0], "texture": "sine"},                      # floor
            {"kind": "rectangle", "origin": [-e, e, 0.0], "edge_u": [2 * e, 0, 0],
             "edge_v": [0, 0, 2.0], "texture": "sine"},                        # back wall
            {"kind": "rectangle", "origin": [-e, -e, 0.0], "edge_u": [0, 2 * e, 0],
             "edge_v": [0, 0, 2.0], "texture": "sine"},                        # side wall
            {"kind": "box", "min": [-0.9, -0.2, 0.0], "max": [-0.3, 0.5, 0.55]},
            {"kind": "box", "min": [0.35, 0.3, 0.0], "max": [1.05, 0.95, 0.4]},
            {"kind": "sphere", "center": [0.45, -0.55, 0.3], "radius": 0.3},
            {"kind": "sphere", "center": [-0.5, 1.1, 0.25], "radius": 0.25},
        ],
        "trajectory": {
            "kind": "orbit",
            "center": [0.0, 0.0, 0.35],
            "radius": 1.55,
            "height": 1.0,
            "frames": n_frames,
            "sweep_degrees": 300.0,
        },
        "cloud_points": cloud_points,
    }


def _build_primitives(spec: dict, seed: int) -> list:
    prims = []
    for i, p in enumerate(spec.get("primitives", [])):
        tex_kind = p.get("texture", "sine")
        tex_seed = seed * 1000003 + i * 101
        if p["kind"] == "rectangle":
            prims.append(
                Rectangle(p["origin"], p["edge_u"], p["edge_v"],
                          Texture(kind=tex_kind, seed=tex_seed))
            )
        elif p["kind"] == "sphere":
            prims.append(Sphere(p["center"], p["radius"], Texture(kind=tex_kind, seed=tex_seed)))
        elif p["kind"] == "box":
            prims.extend(box_faces(p["min"], p["max"], seed=tex_seed))
        else:
            raise DataError(f"unknown primitive kind {p['kind']!r}")
    if not prims:
        raise DataError("scene spec lists no primitives")
    return prims


def _build_trajectory(spec: dict) -> list[Pose]:
    traj = spec["trajectory"]
    if traj["kind"] == "explicit":
        return [Pose.from_matrix(np.array(m, dtype=np.float64).reshape(4, 4))
                for m in traj["poses"]]
    if traj["kind"] == "orbit":
        center = np.asarray(traj["center"], dtype=np.float64)
        n = int(traj["frames"])
        sweep = np.deg2rad(traj.get("sweep_degrees", 360.0))
        poses = []
        for i in range(n):
            ang = sweep * i / max(n - 1, 1) if sweep < 2 * np.pi else 2 * np.pi * i / n
            eye = center + np.array(
                [traj["radius"] * np.cos(ang), traj["radius"] * np.sin(ang), traj["height"]]
            )
            # look slightly ahead along the orbit so views differ in rotation
            target = center + np.array([0.25 * np.cos(ang + 0.8), 0.25 * np.sin(ang + 0.8), 0.0])
            poses.append(look_at(eye, target))
        return poses
    raise DataError(f"unknown trajectory kind {traj['kind']!r}")


def render_frame(primitives: list, intrinsics: CameraIntrinsics, pose: Pose,
                 index: int = 0) -> RgbdFrame:
    """Exact ray-cast render: nearest primitive wins every pixel."""
    h, w = intrinsics.height, intrinsics.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [(us - intrinsics.cx) / intrinsics.fx, (vs - intrinsics.cy) / intrinsics.fy,
         np.ones_like(us)],
        axis=-1,
    )
    r_wc = pose.rotation.T
    dirs = dirs_cam @ r_wc.T  # world-space directions with unit camera z
    origin = pose.camera_center()
    origins = np.broadcast_to(origin, dirs.shape)
    best_t = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3), dtype=np.float64)
    for prim in primitives:
        t, c = prim.ray_hits(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        color = np.where(closer[..., None], c, color)
    depth = np.where(np.isfinite(best_t), best_t, 0.0)  # camera z, since dir z = 1
    return RgbdFrame(color.astype(np.float32), depth.astype(np.float32), intrinsics, pose, index)


def sample_cloud(primitives: list, total: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted surface samples with texture colors; (total, 6)."""
    areas = np.array([p.area() for p in primitives])
    counts = np.floor(areas / areas.sum() * total).astype(int)
    counts[: total - counts.sum()] += 1
    parts = [p.sample_surface(rng, int(c)) for p, c in zip(primitives, counts) if c > 0]
    return np.concatenate(parts, axis=0).astype(np.float32)


def synth_scene(seed: int, spec: dict) -> SynthScene:
    """Build frames + fused cloud + ground-truth poses from a scene spec."""
    primitives = _build_primitives(spec, seed)
    poses = _build_trajectory(spec)
    intrinsics = CameraIntrinsics.from_dict(spec["intrinsics"])
    frames = [render_frame(primitives, intrinsics, pose, i) for i, pose in enumerate(poses)]
    rng = np.random.default_rng(seed + 777)
    cloud = sample_cloud(primitives, int(spec.get("cloud_points", 50000)), rng)
    return SynthScene(frames=frames, cloud=cloud, poses=poses, primitives=primitives)
