"""Named parameter tensors with paired gradients, plus checkpoint I/O.

Checkpoint format ("LCDW"): magic, u32 version, u64 RNG seed, u32 epoch,
u32 param count, u32 buffer count, then length-prefixed records of
(name, shape, 32-bit little-endian float values). Parameters first, then
buffers (batchnorm running statistics), both in insertion order so two
stores built from the same seed serialize to identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import NumericalError, ShapeError

MAGIC = b"LCDW"
VERSION = 1


class ParamStore:
    """Holds parameters, their gradients, and non-trainable buffers.

    Parameters are created through seeded initializers so that two stores
    built from the same seed are bit-identical.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(self.seed)
        self.epoch = 0
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}

    # -- construction ------------------------------------------------------

    def add_param(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        v = np.ascontiguousarray(value, dtype=self.dtype)
        self._params[name] = v
        self._grads[name] = np.zeros_like(v)

    def add_uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        """Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        v = self.rng.uniform(-bound, bound, size=shape)
        self.add_param(name, v)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self._buffers:
            raise ValueError(f"duplicate buffer {name!r}")
        self._buffers[name] = np.ascontiguousarray(value, dtype=self.dtype)

    # -- access ------------------------------------------------------------

    def param(self, name: str) -> np.ndarray:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        buf = self._buffers[name]
        if buf.shape != value.shape:
            raise ShapeError(f"buffer {name!r}: expected {buf.shape}, got {value.shape}")
        buf[...] = value

    def param_names(self) -> list[str]:
        return list(self._params)

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        acc = self._grads[name]
        if acc.shape != g.shape:
            raise ShapeError(f"gradient for {name!r}: expected {acc.shape}, got {g.shape}")
        acc += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0

    # -- introspection helpers ---------------------------------------------

    def num_values(self) -> int:
        return sum(int(p.size) for p in self._params.values())

    def flat_params(self) -> np.ndarray:
        """Concatenated copy of all parameter values, insertion order."""
        if not self._params:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([p.ravel() for p in self._params.values()])

    def flat_grads(self) -> np.ndarray:
        if not self._grads:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([g.ravel() for g in self._grads.values()])

    def load_flat_params(self, flat: np.ndarray) -> None:
        if flat.size != self.num_values():
            raise ShapeError(f"expected {self.num_values()} values, got {flat.size}")
        i = 0
        for p in self._params.values():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def params_bytes(self, names: list[str] | None = None) -> bytes:
        """Raw bytes of selected parameters; used to assert params untouched."""
        names = self.param_names() if names is None else names
        return b"".join(self._params[n].tobytes() for n in names)

    def check_finite_grads(self) -> None:
        for name, g in self._grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter {name!r}")


# -- checkpoint I/O ----------------------------------------------------------


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(path, store: ParamStore) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQI", VERSION, store.seed, store.epoch))
        fh.write(struct.pack("<II", len(store._params), len(store._buffers)))
        for name, arr in store._params.items():
            _write_record(fh, name, arr)
        for name, arr in store._buffers.items():
            _write_record(fh, name, arr)


def load_checkpoint(path, dtype=np.float32) -> ParamStore:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, seed, epoch = struct.unpack("<IQI", fh.read(16))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n_params, n_buffers = struct.unpack("<II", fh.read(8))
        store = ParamStore(seed=seed, dtype=dtype)
        store.epoch = epoch
        for _ in range(n_params):
            name, data = _read_record(fh)
            store.add_param(name, data)
        for _ in range(n_buffers):
            name, data = _read_record(fh)
            store.add_buffer(name, data)
    return store
