"""Dual auto-encoder producing shared-space descriptors.

Two branches share one embedding space: a convolutional auto-encoder for
64x64 color patches and a point-set auto-encoder (per-point fully-connected
layers with a row-wise max-pool) for N-point colored clouds. Encoders emit
D-dimensional descriptors; decoders reconstruct the inputs with range clamps
(sigmoid for pixels/colors, tanh for point coordinates) so outputs always
satisfy the patch invariants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .ndtensor import LayerSpec, ParamStore, Sequential

DESC_MAGIC = b"LCDD"
DESC_VERSION = 1


@dataclass(frozen=True)
class Descriptor:
    """A point in the shared latent space; the tag records provenance only."""

    values: np.ndarray
    domain_tag: str  # "from_2d" | "from_3d"


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; the defaults are the reference network."""

    embedding_dim: int = 256
    points_per_patch: int = 1024
    patch_size: int = 64
    channels_2d: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    widths_3d_enc: list[int] = field(default_factory=lambda: [64, 128, 256])
    widths_3d_dec: list[int] = field(default_factory=lambda: [512, 1024])
    seed: int = 0

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.patch_size % (2 ** len(self.channels_2d)) != 0:
            raise ValueError(
                f"patch_size {self.patch_size} must be divisible by "
                f"2^{len(self.channels_2d)} for the stride-2 stack"
            )

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "points_per_patch": self.points_per_patch,
            "patch_size": self.patch_size,
            "channels_2d": list(self.channels_2d),
            "widths_3d_enc": list(self.widths_3d_enc),
            "widths_3d_dec": list(self.widths_3d_dec),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def _relu_bn() -> list[LayerSpec]:
    return [LayerSpec("relu"), LayerSpec("batchnorm")]


# -- range clamps --------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_backward(y, gy):
    return gy * y * (1.0 - y)


def _tanh_backward(y, gy):
    return gy * (1.0 - y * y)


# -- input validation -----------------------------------------------------------


def validate_image_patch(patch: np.ndarray, size: int) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.shape != (size, size, 3):
        raise ShapeError(f"image patch must be ({size}, {size}, 3), got {patch.shape}")
    if not np.isfinite(patch).all():
        raise ValueError("image patch contains non-finite values")
    if patch.min() < 0.0 or patch.max() > 1.0:
        raise ValueError("image patch values must lie in [0, 1]")
    return patch


def validate_point_patch(points: np.ndarray, n: int) -> np.ndarray:
    points = np.asarray(points)
    if points.shape != (n, 6):
        raise ShapeError(f"point patch must be ({n}, 6), got {points.shape}")
    if not np.isfinite(points).all():
        raise ValueError("point patch contains non-finite values")
    if np.abs(points[:, :3]).max() > 1.0 + 1e-9:
        raise ValueError("point coordinates must lie in [-1, 1] after normalization")
    if points[:, 3:].min() < 0.0 or points[:, 3:].max() > 1.0:
        raise ValueError("point colors must lie in [0, 1]")
    return points


class DualAutoEncoder:
    """The two-branch network; owns the ParamStore and all four stacks."""

    def __init__(self, config: NetworkConfig, params: ParamStore | None = None,
                 dtype=np.float32):
        self.config = config
        c = config
        d = c.embedding_dim
        side = c.patch_size // (2 ** len(c.channels_2d))
        self._bottleneck = (c.channels_2d[-1], side, side)
        flat = int(np.prod(self._bottleneck))

        enc2d = []
        for ch in c.channels_2d:
            enc2d += [LayerSpec("conv2d", kernel_size=3, out_dim=ch, stride=2, padding=1)]
            enc2d += _relu_bn()
        dec2d = []
        rev = list(reversed(c.channels_2d[:-1])) + [3]
        for i, ch in enumerate(rev):
            dec2d += [LayerSpec("deconv2d", kernel_size=4, out_dim=ch, stride=2, padding=1)]
            if i < len(rev) - 1:
                dec2d += _relu_bn()
        enc3d = []
        for w in c.widths_3d_enc:
            enc3d += [LayerSpec("linear", out_dim=w)] + _relu_bn()
        enc3d += [LayerSpec("maxpool_rows"), LayerSpec("linear", out_dim=d)]
        dec3d = []
        for w in c.widths_3d_dec:
            dec3d += [LayerSpec("linear", out_dim=w)] + _relu_bn()
        dec3d += [LayerSpec("linear", out_dim=c.points_per_patch * 6)]

        if params is None:
            params = ParamStore(seed=c.seed, dtype=dtype)
        self.params = params
        build = not params.param_names()
        self.enc2d_conv = Sequential(enc2d, (3, c.patch_size, c.patch_size), "enc2d",
                                     params if build else None)
        self.enc2d_head = Sequential([LayerSpec("linear", out_dim=d)], (flat,),
                                     "enc2d_head", params if build else None)
        self.dec2d_head = Sequential([LayerSpec("linear", out_dim=flat)] + _relu_bn(),
                                     (d,), "dec2d_head", params if build else None)
        self.dec2d_conv = Sequential(dec2d, self._bottleneck, "dec2d",
                                     params if build else None)
        self.enc3d = Sequential(enc3d, (c.points_per_patch, 6), "enc3d",
                                params if build else None)
        self.dec3d = Sequential(dec3d, (d,), "dec3d", params if build else None)

    # -- batched train-path API (channels-first images) ------------------------

    def encode_2d_batch(self, images: np.ndarray, mode: str = "eval"):
        """images (B, H, W, 3) in [0, 1] -> (descriptors (B, D), cache)."""
        if images.ndim != 4 or images.shape[1:] != (self.config.patch_size,) * 2 + (3,):
            raise ShapeError(
                f"expected (B, {self.config.patch_size}, {self.config.patch_size}, 3), "
                f"got {images.shape}"
            )
        x = np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=self.params.dtype)
        h, c1 = self.enc2d_conv.forward(self.params, x, mode)
        flat = h.reshape(h.shape[0], -1)
        desc, c2 = self.enc2d_head.forward(self.params, flat, mode)
        return desc, (c1, c2, h.shape)

    def backward_2d_encoder(self, cache, gdesc: np.ndarray) -> None:
        c1, c2, h_shape = cache
        gflat = self.enc2d_head.backward(self.params, c2, gdesc)
        self.enc2d_conv.backward(self.params, c1, gflat.reshape(h_shape))

    def decode_2d_batch(self, desc: np.ndarray, mode: str = "eval"):
        """descriptors (B, D) -> (reconstructions (B, H, W, 3) in [0, 1], cache)."""
        self._check_desc(desc)
        flat, c1 = self.dec2d_head.forward(self.params, desc, mode)
        h = flat.reshape((desc.shape[0],) + self._bottleneck)
        raw, c2 = self.dec2d_conv.forward(self.params, h, mode)
        out = _sigmoid(raw)
        return out.transpose(0, 2, 3, 1), (c1, c2, flat.shape, out)

    def backward_2d_decoder(self, cache, grecon: np.ndarray) -> np.ndarray:
        c1, c2, flat_shape, out = cache
        graw = _sigmoid_backward(out, grecon.transpose(0, 3, 1, 2))
        gh = self.dec2d_conv.backward(self.params, c2, graw)
        return self.dec2d_head.backward(self.params, c1, gh.reshape(flat_shape))

    def encode_3d_batch(self, points: np.ndarray, mode: str = "eval"):
        """point patches (B, N, 6) -> (descriptors (B, D), cache)."""
        n = self.config.points_per_patch
        if points.ndim != 3 or points.shape[1:] != (n, 6):
            raise ShapeError(f"expected (B, {n}, 6), got {points.shape}")
        x = np.ascontiguousarray(points, dtype=self.params.dtype)
        return self.enc3d.forward(self.params, x, mode)

    def backward_3d_encoder(self, cache, gdesc: np.ndarray) -> None:
        self.enc3d.backward(self.params, cache, gdesc)

    def decode_3d_batch(self, desc: np.ndarray, mode: str = "eval"):
        """descriptors (B, D) -> (point patches (B, N, 6), cache).

        Coordinates pass through tanh, colors through sigmoid, so every
        output satisfies the point-patch invariants.
        """
        self._check_desc(desc)
        raw, c1 = self.dec3d.forward(self.params, desc, mode)
        pts = raw.reshape(desc.shape[0], self.config.points_per_patch, 6)
        out = np.empty_like(pts)
        out[:, :, :3] = np.tanh(pts[:, :, :3])
        out[:, :, 3:] = _sigmoid(pts[:, :, 3:])
        return out, (c1, out)

    def backward_3d_decoder(self, cache, gpts: np.ndarray) -> np.ndarray:
        c1, out = cache
        graw = np.empty_like(out)
        graw[:, :, :3] = _tanh_backward(out[:, :, :3], gpts[:, :, :3])
        graw[:, :, 3:] = _sigmoid_backward(out[:, :, 3:], gpts[:, :, 3:])
        return self.dec3d.backward(self.params, c1, graw.reshape(graw.shape[0], -1))

    def _check_desc(self, desc: np.ndarray) -> None:
        if desc.ndim != 2 or desc.shape[1] != self.config.embedding_dim:
            raise ShapeError(
                f"expected (B, {self.config.embedding_dim}) descriptors, got {desc.shape}"
            )

    # -- single-item API ---------------------------------------------------------

    def encode_2d(self, patch: np.ndarray, mode: str = "eval") -> Descriptor:
        patch = validate_image_patch(patch, self.config.patch_size)
        desc, _ = self.encode_2d_batch(patch[None], mode)
        return Descriptor(values=desc[0], domain_tag="from_2d")

    def decode_2d(self, desc: Descriptor | np.ndarray, mode: str = "eval") -> np.ndarray:
        v = desc.values if isinstance(desc, Descriptor) else np.asarray(desc)
        out, _ = self.decode_2d_batch(v[None].astype(self.params.dtype), mode)
        return out[0]

    def encode_3d(self, points: np.ndarray, mode: str = "eval") -> Descriptor:
        points = validate_point_patch(points, self.config.points_per_patch)
        desc, _ = self.encode_3d_batch(points[None], mode)
        return Descriptor(values=desc[0], domain_tag="from_3d")

    def decode_3d(self, desc: Descriptor | np.ndarray, mode: str = "eval") -> np.ndarray:
        v = desc.values if isinstance(desc, Descriptor) else np.asarray(desc)
        out, _ = self.decode_3d_batch(v[None].astype(self.params.dtype), mode)
        return out[0]


# -- descriptor file I/O ---------------------------------------------------------


def save_descriptors(path, descriptors: np.ndarray, metadata: np.ndarray | None = None) -> None:
    """Write a descriptor file: magic, version, D, count, values, metadata.

    metadata, when present, is one fixed-length float vector per descriptor
    (e.g. a keypoint location).
    """
    descriptors = np.asarray(descriptors, dtype="<f4")
    if descriptors.ndim != 2:
        raise ShapeError(f"descriptors must be (count, D), got {descriptors.shape}")
    count, dim = descriptors.shape
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<III", DESC_VERSION, dim, count))
        fh.write(np.ascontiguousarray(descriptors).tobytes())
        if metadata is None:
            fh.write(struct.pack("<I", 0))
        else:
            metadata = np.asarray(metadata, dtype="<f4")
            if metadata.shape[0] != count:
                raise ShapeError(f"metadata rows {metadata.shape[0]} != count {count}")
            fh.write(struct.pack("<I", metadata.shape[1]))
            fh.write(np.ascontiguousarray(metadata).tobytes())


def load_descriptors(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DESC_MAGIC:
            raise ValueError(f"bad descriptor-file magic {magic!r}")
        version, dim, count = struct.unpack("<III", fh.read(12))
        if version != DESC_VERSION:
            raise ValueError(f"unsupported descriptor-file version {version}")
        descs = np.frombuffer(fh.read(4 * dim * count), dtype="<f4").reshape(count, dim)
        (meta_dim,) = struct.unpack("<I", fh.read(4))
        meta = None
        if meta_dim:
            meta = np.frombuffer(fh.read(4 * meta_dim * count), dtype="<f4").reshape(
                count, meta_dim
            )
    return descs.copy(), None if meta is None else meta.copy()
