"""The six layer kinds of the descriptor network, forward and backward.

Each layer is a pure function of (spec, params, input); backward consumes the
cache produced by the matching forward call and accumulates parameter
gradients into the store. Convolutions run as im2col plus one matmul; the
transposed convolution is its exact adjoint (scatter-add over kernel offsets
in a fixed order, so results are deterministic).

Shape conventions: conv/deconv act on (B, C, H, W); linear on (..., F);
batchnorm normalizes the trailing feature axis of 2-D/3-D inputs or the
channel axis of 4-D inputs; maxpool_rows reduces (B, N, F) -> (B, F).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

PARAMETRIC_KINDS = ("conv2d", "deconv2d", "linear", "batchnorm")
KINDS = ("conv2d", "deconv2d", "linear", "relu", "batchnorm", "maxpool_rows")

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus the conv/deconv/linear hyperparameters.

    kernel_size/out_dim/stride/padding follow the conv(kernel_size, out_dim,
    stride, padding) notation; out_dim doubles as the feature count for
    linear and batchnorm.
    """

    kind: str
    kernel_size: int = 0
    out_dim: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.kind in ("conv2d", "deconv2d", "linear") and self.out_dim < 1:
            raise ValueError(f"{self.kind} needs out_dim >= 1, got {self.out_dim}")


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"non-finite values in input to {name}")


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Static shape arithmetic for one layer (batch dim excluded)."""
    if spec.kind == "conv2d":
        c, h, w = in_shape
        k, s, p = spec.kernel_size, spec.stride, spec.padding
        return (spec.out_dim, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if spec.kind == "deconv2d":
        c, h, w = in_shape
        k, s, p = spec.kernel_size, spec.stride, spec.padding
        return (spec.out_dim, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)
    if spec.kind == "linear":
        return in_shape[:-1] + (spec.out_dim,)
    if spec.kind == "maxpool_rows":
        if len(in_shape) != 2:
            raise ShapeError(f"maxpool_rows expects (N, F) per item, got {in_shape}")
        return (in_shape[1],)
    return in_shape  # relu, batchnorm


# -- im2col helpers ----------------------------------------------------------


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window_view(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    """(B, OH, OW, C, K, K) strided view over a padded (B, C, H, W) array."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, oh, ow, c, k, k), (sb, sh * s, sw * s, sc, sh, sw), writeable=False
    )


def _scatter_windows(dst: np.ndarray, cols: np.ndarray, k: int, s: int) -> None:
    """Adjoint of _window_view: add cols (B, OH, OW, C, K, K) into (B, C, H, W)."""
    _, oh, ow, _, _, _ = cols.shape
    for ki in range(k):
        for kj in range(k):
            dst[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += cols[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)


# -- conv2d ------------------------------------------------------------------


def _conv2d_forward(spec, params, name, x):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W), got {x.shape}")
    w = params.param(name + ".weight")  # (C_out, C_in, K, K)
    b = params.param(name + ".bias")
    cout, cin, k, _ = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    s, p = spec.stride, spec.padding
    oh = (x.shape[2] + 2 * p - k) // s + 1
    ow = (x.shape[3] + 2 * p - k) // s + 1
    xp = _pad2d(x, p)
    cols = _window_view(xp, k, s, oh, ow).reshape(x.shape[0] * oh * ow, cin * k * k)
    cols = np.ascontiguousarray(cols)
    y = cols @ w.reshape(cout, -1).T + b
    y = y.reshape(x.shape[0], oh, ow, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, cols)


def _conv2d_backward(spec, params, name, cache, gy):
    x_shape, cols = cache
    w = params.param(name + ".weight")
    cout, cin, k, _ = w.shape
    s, p = spec.stride, spec.padding
    b_, _, oh, ow = gy.shape
    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, cout)
    params.accumulate_grad(name + ".weight", (gym.T @ cols).reshape(w.shape))
    params.accumulate_grad(name + ".bias", gym.sum(axis=0))
    dcols = (gym @ w.reshape(cout, -1)).reshape(b_, oh, ow, cin, k, k)
    hp, wp = x_shape[2] + 2 * p, x_shape[3] + 2 * p
    dxp = np.zeros((b_, cin, hp, wp), dtype=gy.dtype)
    _scatter_windows(dxp, dcols, k, s)
    return dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]]


# -- deconv2d (transposed convolution) ----------------------------------------


def _deconv2d_forward(spec, params, name, x):
    if x.ndim != 4:
        raise ShapeError(f"deconv2d expects (B, C, H, W), got {x.shape}")
    w = params.param(name + ".weight")  # (C_in, C_out, K, K)
    b = params.param(name + ".bias")
    cin, cout, k, _ = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"deconv2d channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    s, p = spec.stride, spec.padding
    bsz, _, h, wd = x.shape
    oh = (h - 1) * s - 2 * p + k
    ow = (wd - 1) * s - 2 * p + k
    xm = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, cin)
    cols = (xm @ w.reshape(cin, -1)).reshape(bsz, h, wd, cout, k, k)
    yp = np.zeros((bsz, cout, oh + 2 * p, ow + 2 * p), dtype=x.dtype)
    _scatter_windows(yp, cols, k, s)
    y = yp[:, :, p : p + oh, p : p + ow] + b[None, :, None, None]
    return np.ascontiguousarray(y), (x, xm)


def _deconv2d_backward(spec, params, name, cache, gy):
    x, xm = cache
    w = params.param(name + ".weight")
    cin, cout, k, _ = w.shape
    s, p = spec.stride, spec.padding
    bsz, _, h, wd = x.shape
    gyp = _pad2d(gy, p)
    gcols = _window_view(gyp, k, s, h, wd).reshape(bsz * h * wd, cout * k * k)
    gcols = np.ascontiguousarray(gcols)
    params.accumulate_grad(name + ".weight", (xm.T @ gcols).reshape(w.shape))
    params.accumulate_grad(name + ".bias", gy.sum(axis=(0, 2, 3)))
    dxm = gcols @ w.reshape(cin, -1).T
    return dxm.reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)


# -- linear -------------------------------------------------------------------


def _linear_forward(spec, params, name, x):
    w = params.param(name + ".weight")  # (out, in)
    b = params.param(name + ".bias")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} input features, got {x.shape[-1]}")
    xm = x.reshape(-1, x.shape[-1])
    y = xm @ w.T + b
    return y.reshape(x.shape[:-1] + (w.shape[0],)), (x.shape, xm)


def _linear_backward(spec, params, name, cache, gy):
    x_shape, xm = cache
    w = params.param(name + ".weight")
    gym = gy.reshape(-1, w.shape[0])
    params.accumulate_grad(name + ".weight", gym.T @ xm)
    params.accumulate_grad(name + ".bias", gym.sum(axis=0))
    return (gym @ w).reshape(x_shape)


# -- relu ---------------------------------------------------------------------


def _relu_forward(x):
    y = np.maximum(x, 0)
    return y, (x > 0)


def _relu_backward(cache, gy):
    return gy * cache


# -- batchnorm ------------------------------------------------------------------


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], int]:
    """Reduction axes and feature count for normalization."""
    if x.ndim == 4:
        return (0, 2, 3), x.shape[1]
    if x.ndim in (2, 3):
        return tuple(range(x.ndim - 1)), x.shape[-1]
    raise ShapeError(f"batchnorm expects 2-4 dims, got {x.ndim}")


def _bn_reshape(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return v[None, :, None, None]
    return v


def _batchnorm_forward(spec, params, name, x, mode):
    axes, feat = _bn_axes(x)
    scale = params.param(name + ".scale")
    shift = params.param(name + ".shift")
    if scale.shape[0] != feat:
        raise ShapeError(f"batchnorm expects {scale.shape[0]} features, got {feat}")
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        rm = params.buffer(name + ".running_mean")
        rv = params.buffer(name + ".running_var")
        rm[...] = _BN_MOMENTUM * rm + (1 - _BN_MOMENTUM) * mean
        rv[...] = _BN_MOMENTUM * rv + (1 - _BN_MOMENTUM) * var
    else:
        mean = params.buffer(name + ".running_mean")
        var = params.buffer(name + ".running_var")
    inv_std = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - _bn_reshape(mean, x)) * _bn_reshape(inv_std, x)
    y = xhat * _bn_reshape(scale, x) + _bn_reshape(shift, x)
    return y, (xhat, inv_std, axes, mode)


def _batchnorm_backward(spec, params, name, cache, gy):
    xhat, inv_std, axes, mode = cache
    scale = params.param(name + ".scale")
    params.accumulate_grad(name + ".shift", gy.sum(axis=axes))
    params.accumulate_grad(name + ".scale", (gy * xhat).sum(axis=axes))
    gxhat = gy * _bn_reshape(scale, gy)
    if mode != "train":
        return gxhat * _bn_reshape(inv_std, gy)
    m = gy.size // scale.size
    term = gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (
        (gxhat * xhat).sum(axis=axes, keepdims=True) / m
    )
    return term * _bn_reshape(inv_std, gy)


# -- maxpool over rows ----------------------------------------------------------


def _maxpool_rows_forward(x):
    if x.ndim != 3:
        raise ShapeError(f"maxpool_rows expects (B, N, F), got {x.shape}")
    idx = x.argmax(axis=1)  # first-index ties, deterministic
    y = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return y, (x.shape, idx)


def _maxpool_rows_backward(cache, gy):
    x_shape, idx = cache
    dx = np.zeros(x_shape, dtype=gy.dtype)
    np.put_along_axis(dx, idx[:, None, :], gy[:, None, :], axis=1)
    return dx


# -- dispatch -------------------------------------------------------------------


def layer_forward(spec: LayerSpec, params, x: np.ndarray, mode: str = "train",
                  name: str = "layer"):
    """Run one layer; returns (output, cache) where cache feeds layer_backward."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_finite(f"{spec.kind} {name!r}", x)
    if spec.kind == "conv2d":
        y, c = _conv2d_forward(spec, params, name, x)
    elif spec.kind == "deconv2d":
        y, c = _deconv2d_forward(spec, params, name, x)
    elif spec.kind == "linear":
        y, c = _linear_forward(spec, params, name, x)
    elif spec.kind == "relu":
        y, c = _relu_forward(x)
    elif spec.kind == "batchnorm":
        y, c = _batchnorm_forward(spec, params, name, x, mode)
    elif spec.kind == "maxpool_rows":
        y, c = _maxpool_rows_forward(x)
    else:  # pragma: no cover - guarded by LayerSpec
        raise ValueError(spec.kind)
    return y, (spec.kind, c)


def layer_backward(spec: LayerSpec, params, cache, gy: np.ndarray,
                   name: str = "layer") -> np.ndarray:
    """Gradient w.r.t. the layer input; parameter grads accumulate in the store."""
    if cache is None:
        raise ValueError(f"layer_backward for {name!r} called without a forward cache")
    kind, c = cache
    if kind != spec.kind:
        raise ValueError(f"cache from {kind!r} used with {spec.kind!r} layer")
    if spec.kind == "conv2d":
        return _conv2d_backward(spec, params, name, c, gy)
    if spec.kind == "deconv2d":
        return _deconv2d_backward(spec, params, name, c, gy)
    if spec.kind == "linear":
        return _linear_backward(spec, params, name, c, gy)
    if spec.kind == "relu":
        if gy.shape != c.shape:
            raise ShapeError(f"relu upstream grad {gy.shape} != input {c.shape}")
        return _relu_backward(c, gy)
    if spec.kind == "batchnorm":
        return _batchnorm_backward(spec, params, name, c, gy)
    if spec.kind == "maxpool_rows":
        return _maxpool_rows_backward(c, gy)
    raise ValueError(spec.kind)  # pragma: no cover


def init_layer_params(spec: LayerSpec, params, name: str, in_features: int) -> None:
    """Create this layer's parameters/buffers in the store (no-op for relu/pool)."""
    if spec.kind == "conv2d":
        k = spec.kernel_size
        fan_in = in_features * k * k
        params.add_uniform(name + ".weight", (spec.out_dim, in_features, k, k), fan_in)
        params.add_uniform(name + ".bias", (spec.out_dim,), fan_in)
    elif spec.kind == "deconv2d":
        k = spec.kernel_size
        fan_in = in_features * k * k
        params.add_uniform(name + ".weight", (in_features, spec.out_dim, k, k), fan_in)
        params.add_uniform(name + ".bias", (spec.out_dim,), fan_in)
    elif spec.kind == "linear":
        params.add_uniform(name + ".weight", (spec.out_dim, in_features), in_features)
        params.add_uniform(name + ".bias", (spec.out_dim,), in_features)
    elif spec.kind == "batchnorm":
        params.add_param(name + ".scale", np.ones(in_features))
        params.add_param(name + ".shift", np.zeros(in_features))
        params.add_buffer(name + ".running_mean", np.zeros(in_features))
        params.add_buffer(name + ".running_var", np.ones(in_features))


class Sequential:
    """A fixed stack of layers sharing one ParamStore under a name prefix."""

    def __init__(self, specs: list[LayerSpec], in_shape: tuple[int, ...], prefix: str,
                 params=None):
        self.specs = list(specs)
        self.prefix = prefix
        self.in_shape = tuple(in_shape)
        self.names = [f"{prefix}.{i}" for i in range(len(specs))]
        shape = tuple(in_shape)
        self.shapes = [shape]
        for spec in self.specs:
            shape = output_shape(spec, shape)
            self.shapes.append(shape)
        if params is not None:
            self.bind(params)

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def _feature_count(self, i: int) -> int:
        # per-item shapes: (C, H, W) for conv activations, (N, F) or (F,) otherwise
        shape = self.shapes[i]
        if self.specs[i].kind in ("conv2d", "deconv2d"):
            return shape[0]
        if self.specs[i].kind == "batchnorm" and len(shape) == 3:
            return shape[0]
        return shape[-1]

    def bind(self, params) -> None:
        """Create parameters for every layer in store insertion order."""
        for i, spec in enumerate(self.specs):
            init_layer_params(spec, params, self.names[i], self._feature_count(i))

    def forward(self, params, x: np.ndarray, mode: str):
        caches = []
        for i, spec in enumerate(self.specs):
            x, cache = layer_forward(spec, params, x, mode, name=self.names[i])
            caches.append(cache)
        return x, caches

    def backward(self, params, caches, gy: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(self.specs))):
            gy = layer_backward(self.specs[i], params, caches[i], gy, name=self.names[i])
        return gy
