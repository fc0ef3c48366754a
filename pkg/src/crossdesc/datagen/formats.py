"""Scene directory file formats: PPM (P6) color, 16-bit PGM depth in
millimeters, 4x4 row-major pose text files, intrinsics JSON, and PLY clouds
(x y z r g b)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from .camera import CameraIntrinsics, Pose


# -- PPM / PGM ----------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """image: (H, W, 3) float in [0,1] or uint8."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def _read_pnm_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise DataError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise DataError("truncated PNM header")
        line = line.split(b"#")[0]
        fields.extend(line.split())
    w, h, maxval = (int(v) for v in fields[:3])
    return w, h, maxval


def read_ppm(path) -> np.ndarray:
    """Returns (H, W, 3) float32 in [0,1]."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P6")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise DataError(f"truncated PPM payload in {path}")
    return (data.reshape(h, w, 3).astype(np.float32)) / maxval


def write_pgm16(path, depth_m: np.ndarray) -> None:
    """Depth in meters -> 16-bit big-endian PGM in millimeters (0 = invalid)."""
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(mm.tobytes())


def read_pgm16(path) -> np.ndarray:
    """Returns depth in meters as float32 (0 where invalid)."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P5")
        if maxval != 65535:
            raise DataError(f"expected 16-bit PGM, maxval {maxval}")
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    if data.size != w * h:
        raise DataError(f"truncated PGM payload in {path}")
    return data.reshape(h, w).astype(np.float32) / 1000.0


# -- pose / intrinsics -----------------------------------------------------------


def write_pose(path, pose: Pose) -> None:
    m = pose.matrix()
    lines = [" ".join(f"{v:.17g}" for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose(path) -> Pose:
    values = []
    for line in Path(path).read_text().split("\n"):
        values.extend(float(v) for v in line.split())
    if len(values) != 16:
        raise DataError(f"pose file {path} must hold 16 values, got {len(values)}")
    return Pose.from_matrix(np.array(values).reshape(4, 4))


def write_intrinsics(path, intrinsics: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps(intrinsics.to_dict(), indent=2, sort_keys=True))


def read_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


# -- PLY ---------------------------------------------------------------------------


def write_ply(path, cloud: np.ndarray) -> None:
    """cloud: (M, 6) with xyz + rgb in [0,1]; binary little-endian output."""
    cloud = np.asarray(cloud)
    if cloud.ndim != 2 or cloud.shape[1] != 6:
        raise DataError(f"cloud must be (M, 6), got {cloud.shape}")
    m = cloud.shape[0]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {m}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(m, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = cloud[:, :3]
    rec["rgb"] = np.clip(np.round(cloud[:, 3:] * 255.0), 0, 255)
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(rec.tobytes())


def read_ply(path) -> np.ndarray:
    """Reads ascii or binary_little_endian PLY with xyz (+ optional rgb);
    returns (M, 6) float32 with colors in [0,1] (0.5 gray when absent)."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise DataError(f"{path} is not a PLY file")
        fmt = None
        count = 0
        props: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise DataError("truncated PLY header")
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == b"format":
                fmt = tokens[1].decode()
            elif tokens[0] == b"element":
                in_vertex = tokens[1] == b"vertex"
                if in_vertex:
                    count = int(tokens[2])
            elif tokens[0] == b"property" and in_vertex:
                props.append((tokens[1].decode(), tokens[2].decode()))
            elif tokens[0] == b"end_header":
                break
        name_map = {"red": "r", "green": "g", "blue": "b"}
        names = [name_map.get(n, n) for _, n in props]
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                rows.append([float(v) for v in fh.readline().split()])
            table = {n: np.array([r[i] for r in rows]) for i, n in enumerate(names)}
            for (typ, _), n in zip(props, names):
                if typ in ("uchar", "uint8") and n in ("r", "g", "b"):
                    table[n] = table[n] / 255.0
        elif fmt == "binary_little_endian":
            np_types = {
                "float": "<f4", "float32": "<f4", "double": "<f8",
                "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4",
                "uint": "<u4", "short": "<i2", "ushort": "<u2",
            }
            dtype = np.dtype([(n, np_types[t]) for (t, _), n in zip(props, names)])
            data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
            if data.size != count:
                raise DataError(f"truncated PLY payload in {path}")
            table = {n: data[n].astype(np.float64) for n in names}
            for (typ, _), n in zip(props, names):
                if typ in ("uchar", "uint8") and n in ("r", "g", "b"):
                    table[n] = table[n] / 255.0
        else:
            raise DataError(f"unsupported PLY format {fmt!r}")
    if not all(k in table for k in ("x", "y", "z")):
        raise DataError("PLY vertex element lacks x/y/z")
    m = len(table["x"])
    out = np.full((m, 6), 0.5, dtype=np.float32)
    out[:, 0] = table["x"]
    out[:, 1] = table["y"]
    out[:, 2] = table["z"]
    for i, ch in enumerate(("r", "g", "b")):
        if ch in table:
            out[:, 3 + i] = table[ch]
    return out


# -- scene directories ----------------------------------------------------------------


def save_scene(scene_dir, frames, cloud: np.ndarray) -> None:
    """Lay out a scene directory: frame_XXXX.{ppm,pgm,pose.txt},
    intrinsics.json, cloud.ply."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise DataError("scene has no frames")
    write_intrinsics(scene_dir / "intrinsics.json", frames[0].intrinsics)
    for fr in frames:
        stem = f"frame_{fr.index:04d}"
        write_ppm(scene_dir / f"{stem}.ppm", fr.color)
        write_pgm16(scene_dir / f"{stem}.pgm", fr.depth)
        write_pose(scene_dir / f"{stem}.pose.txt", fr.pose)
    write_ply(scene_dir / "cloud.ply", cloud)


def load_scene(scene_dir):
    """Load a scene directory; returns (frames, cloud)."""
    from .camera import RgbdFrame

    scene_dir = Path(scene_dir)
    intr_path = scene_dir / "intrinsics.json"
    if not intr_path.exists():
        raise DataError(f"{scene_dir} has no intrinsics.json")
    intrinsics = read_intrinsics(intr_path)
    frames = []
    for ppm in sorted(scene_dir.glob("frame_*.ppm")):
        stem = ppm.stem
        index = int(stem.split("_")[1])
        color = read_ppm(ppm)
        depth = read_pgm16(scene_dir / f"{stem}.pgm")
        pose = read_pose(scene_dir / f"{stem}.pose.txt")
        frames.append(RgbdFrame(color, depth, intrinsics, pose, index))
    if not frames:
        raise DataError(f"{scene_dir} holds no frames")
    cloud_path = scene_dir / "cloud.ply"
    cloud = read_ply(cloud_path) if cloud_path.exists() else None
    return frames, cloud
