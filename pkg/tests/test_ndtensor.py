import numpy as np
import pytest

from crossdesc.errors import NumericalError, ShapeError
from crossdesc.ndtensor import (
    LayerSpec,
    ParamStore,
    Sequential,
    grad_check,
    layer_backward,
    layer_forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


def make_store(seed=0, dtype=np.float64):
    return ParamStore(seed=seed, dtype=dtype)


def scalar_loss_fn(spec, in_shape, seed, mode="train"):
    """Wrap one layer into a scalar function of its flattened input.

    The scalar is a fixed random weighting of the layer output so every
    output coordinate contributes to the check.
    """
    rng = np.random.default_rng(seed)
    params = make_store(seed=seed)
    name = "t"
    if spec.kind in ("conv2d", "deconv2d") or (spec.kind == "batchnorm" and len(in_shape) == 4):
        feat = in_shape[1]
    else:
        feat = in_shape[-1]
    from crossdesc.ndtensor.layers import init_layer_params

    init_layer_params(spec, params, name, feat)
    w_out = None

    def fn(flat):
        nonlocal w_out
        x = flat.reshape(in_shape)
        y, cache = layer_forward(spec, params, x, mode, name=name)
        if w_out is None:
            w_out = rng.standard_normal(y.shape)
        loss = float((y * w_out).sum())
        params.zero_grads()
        dx = layer_backward(spec, params, cache, w_out.astype(y.dtype), name=name)
        return loss, dx.ravel()

    return fn, params


LAYER_CASES = [
    (LayerSpec("conv2d", kernel_size=3, out_dim=4, stride=2, padding=1), (2, 3, 8, 8)),
    (LayerSpec("conv2d", kernel_size=1, out_dim=2, stride=1, padding=0), (2, 3, 5, 5)),
    (LayerSpec("deconv2d", kernel_size=4, out_dim=3, stride=2, padding=1), (2, 4, 4, 4)),
    (LayerSpec("deconv2d", kernel_size=3, out_dim=2, stride=1, padding=0), (1, 3, 5, 5)),
    (LayerSpec("linear", out_dim=7), (4, 5)),
    (LayerSpec("linear", out_dim=3), (2, 6, 5)),
    (LayerSpec("relu"), (3, 4, 2, 2)),
    (LayerSpec("batchnorm"), (6, 5)),
    (LayerSpec("batchnorm"), (2, 3, 4, 4)),
    (LayerSpec("maxpool_rows"), (3, 7, 5)),
]


@pytest.mark.parametrize("spec,in_shape", LAYER_CASES, ids=lambda v: str(v))
def test_layer_input_gradients_match_finite_differences(spec, in_shape):
    for seed in range(3):
        fn, _ = scalar_loss_fn(spec, in_shape, seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal(int(np.prod(in_shape))) + 0.05
        err = grad_check(fn, x, epsilon=1e-6)
        assert err < 1e-4, f"{spec.kind}: input-grad FD error {err}"


@pytest.mark.parametrize(
    "spec,in_shape",
    [c for c in LAYER_CASES if c[0].kind in ("conv2d", "deconv2d", "linear", "batchnorm")],
    ids=lambda v: str(v),
)
def test_layer_parameter_gradients_match_finite_differences(spec, in_shape):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(in_shape) + 0.05
    fn_inner, params = scalar_loss_fn(spec, in_shape, 3)
    fn_inner(x.ravel())  # fixes the random output weighting

    def fn(flat):
        params.load_flat_params(flat)
        loss, _ = fn_inner(x.ravel())
        return loss, params.flat_grads()

    err = grad_check(fn, params.flat_params(), epsilon=1e-6)
    assert err < 1e-4, f"{spec.kind}: param-grad FD error {err}"


def test_linear_identity_passthrough():
    params = make_store()
    params.add_param("t.weight", np.eye(4))
    params.add_param("t.bias", np.zeros(4))
    spec = LayerSpec("linear", out_dim=4)
    v = np.array([[1.0, -2.0, 3.0, 0.5]])
    y, _ = layer_forward(spec, params, v, "eval", name="t")
    np.testing.assert_array_equal(y, v)


def test_linear_backward_is_transpose():
    params = make_store()
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    params.add_param("t.weight", w)
    params.add_param("t.bias", np.zeros(2))
    spec = LayerSpec("linear", out_dim=2)
    x = np.array([[1.0, 1.0]])
    _, cache = layer_forward(spec, params, x, "train", name="t")
    up = np.array([[1.0, 1.0]])
    dx = layer_backward(spec, params, cache, up, name="t")
    np.testing.assert_allclose(dx, up @ w)


def test_relu_forward_backward_definition():
    params = make_store()
    spec = LayerSpec("relu")
    y, cache = layer_forward(spec, params, np.array([[-1.0, 0.0, 2.0]]), "train")
    np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])
    y2, cache2 = layer_forward(spec, params, np.array([[-1.0, 2.0]]), "train")
    dx = layer_backward(spec, params, cache2, np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(dx, [[0.0, 1.0]])


def test_conv1x1_matches_per_pixel_loop():
    params = make_store()
    rng = np.random.default_rng(0)
    w = rng.standard_normal((1, 1, 1, 1))
    params.add_param("t.weight", w)
    params.add_param("t.bias", np.zeros(1))
    spec = LayerSpec("conv2d", kernel_size=1, out_dim=1, stride=1, padding=0)
    x = rng.standard_normal((1, 1, 2, 2))
    y, _ = layer_forward(spec, params, x, "eval", name="t")
    expected = np.empty_like(x)
    for i in range(2):
        for j in range(2):
            expected[0, 0, i, j] = w[0, 0, 0, 0] * x[0, 0, i, j]
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_conv_matches_direct_convolution_oracle():
    # brute-force direct convolution, loops over every output coordinate
    rng = np.random.default_rng(5)
    spec = LayerSpec("conv2d", kernel_size=3, out_dim=2, stride=2, padding=1)
    params = make_store(seed=5)
    from crossdesc.ndtensor.layers import init_layer_params

    init_layer_params(spec, params, "t", 3)
    x = rng.standard_normal((2, 3, 6, 6))
    y, _ = layer_forward(spec, params, x, "eval", name="t")
    w = params.param("t.weight")
    b = params.param("t.bias")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros_like(y)
    for n in range(2):
        for co in range(2):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    acc = b[co]
                    for ci in range(3):
                        for ki in range(3):
                            for kj in range(3):
                                acc += w[co, ci, ki, kj] * xp[n, ci, i * 2 + ki, j * 2 + kj]
                    expected[n, co, i, j] = acc
    np.testing.assert_allclose(y, expected, rtol=1e-10, atol=1e-12)


def test_adjoint_identity_for_linear_layer_kinds():
    # <layer(x), y> == <x, backward(y)> for bias-free linear maps
    rng = np.random.default_rng(11)
    cases = [
        (LayerSpec("conv2d", kernel_size=3, out_dim=3, stride=2, padding=1), (2, 2, 8, 8)),
        (LayerSpec("deconv2d", kernel_size=4, out_dim=2, stride=2, padding=1), (2, 3, 4, 4)),
        (LayerSpec("linear", out_dim=6), (3, 4)),
    ]
    from crossdesc.ndtensor.layers import init_layer_params

    for spec, in_shape in cases:
        params = make_store(seed=3)
        feat = in_shape[1] if spec.kind in ("conv2d", "deconv2d") else in_shape[-1]
        init_layer_params(spec, params, "t", feat)
        params.param("t.bias")[...] = 0
        x = rng.standard_normal(in_shape)
        yt, cache = layer_forward(spec, params, x, "eval", name="t")
        y = rng.standard_normal(yt.shape)
        params.zero_grads()
        xadj = layer_backward(spec, params, cache, y, name="t")
        lhs = float((yt * y).sum())
        rhs = float((x * xadj).sum())
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs)), spec.kind


def test_batchnorm_train_output_normalized():
    rng = np.random.default_rng(2)
    params = make_store()
    from crossdesc.ndtensor.layers import init_layer_params

    spec = LayerSpec("batchnorm")
    init_layer_params(spec, params, "t", 5)
    x = rng.standard_normal((256, 5)) * 3.0 + 7.0
    y, _ = layer_forward(spec, params, x, "train", name="t")
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-3)


def test_batchnorm_eval_requires_populated_running_stats():
    params = make_store()
    from crossdesc.ndtensor.layers import init_layer_params

    spec = LayerSpec("batchnorm")
    init_layer_params(spec, params, "t", 4)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 4)) * 2 + 1
    # train once to populate, then eval must use running stats (not batch stats)
    layer_forward(spec, params, x, "train", name="t")
    y_eval, _ = layer_forward(spec, params, x, "eval", name="t")
    rm = params.buffer("t.running_mean")
    rv = params.buffer("t.running_var")
    expected = (x - rm) / np.sqrt(rv + 1e-5)
    np.testing.assert_allclose(y_eval, expected, rtol=1e-10)


def test_maxpool_rows_is_permutation_invariant():
    rng = np.random.default_rng(4)
    params = make_store()
    spec = LayerSpec("maxpool_rows")
    x = rng.standard_normal((2, 9, 6))
    y1, _ = layer_forward(spec, params, x, "eval")
    perm = rng.permutation(9)
    y2, _ = layer_forward(spec, params, x[:, perm, :], "eval")
    np.testing.assert_array_equal(y1, y2)


def test_shape_mismatch_rejected_with_dimension_named():
    params = make_store(seed=1)
    from crossdesc.ndtensor.layers import init_layer_params

    spec = LayerSpec("conv2d", kernel_size=3, out_dim=2, stride=1, padding=1)
    init_layer_params(spec, params, "t", 3)
    with pytest.raises(ShapeError, match="channel"):
        layer_forward(spec, params, np.zeros((1, 4, 8, 8)), "train", name="t")


def test_nonfinite_input_rejected():
    params = make_store()
    x = np.array([[1.0, np.nan]])
    with pytest.raises(ValueError, match="non-finite"):
        layer_forward(LayerSpec("relu"), params, x, "train")


def test_missing_cache_rejected():
    params = make_store()
    with pytest.raises(ValueError, match="cache"):
        layer_backward(LayerSpec("relu"), params, None, np.zeros((1, 2)))


def test_sgd_update_rule_and_zeroing():
    params = make_store()
    params.add_param("w", np.array([1.0]))
    params.accumulate_grad("w", np.array([0.5]))
    sgd_step(params, 0.01)
    np.testing.assert_allclose(params.param("w"), [0.995])
    np.testing.assert_array_equal(params.grad("w"), [0.0])


def test_sgd_zero_gradient_is_fixed_point():
    params = make_store()
    params.add_param("w", np.array([2.0, -3.0]))
    sgd_step(params, 0.1)
    np.testing.assert_array_equal(params.param("w"), [2.0, -3.0])


def test_sgd_descends_quadratic():
    # f(w) = w^2, grad = 2w; one step from w=1 at lr 0.1 lands on 0.8
    params = make_store()
    params.add_param("w", np.array([1.0]))
    loss_before = float(params.param("w")[0] ** 2)
    params.accumulate_grad("w", 2.0 * params.param("w"))
    sgd_step(params, 0.1)
    np.testing.assert_allclose(params.param("w"), [0.8])
    assert float(params.param("w")[0] ** 2) < loss_before


def test_sgd_rejects_nonfinite_gradient_naming_parameter():
    params = make_store()
    params.add_param("bad_param", np.array([1.0]))
    params.accumulate_grad("bad_param", np.array([np.inf]))
    with pytest.raises(NumericalError, match="bad_param"):
        sgd_step(params, 0.01)


def test_grad_check_linear_function():
    fn = lambda x: (float(x.sum()), np.ones_like(x))
    err = grad_check(fn, np.random.default_rng(0).standard_normal(16))
    assert err < 1e-8


def test_grad_check_quadratic_norm():
    x = np.random.default_rng(1).standard_normal(32)
    fn = lambda v: (float((v**2).sum()), 2.0 * v)
    assert grad_check(fn, x) < 1e-6


def test_grad_check_rejects_nonscalar():
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda v: (v, np.ones_like(v)), np.ones(3))


def test_param_store_seed_determinism():
    a = ParamStore(seed=42)
    b = ParamStore(seed=42)
    for s in (a, b):
        s.add_uniform("w", (4, 4), fan_in=4)
        s.add_uniform("b", (4,), fan_in=4)
    assert a.params_bytes() == b.params_bytes()


def test_checkpoint_roundtrip(tmp_path):
    store = ParamStore(seed=9, dtype=np.float32)
    store.add_uniform("enc.w", (3, 5), fan_in=5)
    store.add_buffer("enc.rm", np.arange(3, dtype=np.float32))
    store.epoch = 17
    p = tmp_path / "ck.lcdw"
    save_checkpoint(p, store)
    assert p.read_bytes()[:4] == b"LCDW"
    loaded = load_checkpoint(p)
    assert loaded.seed == 9 and loaded.epoch == 17
    np.testing.assert_array_equal(loaded.param("enc.w"), store.param("enc.w"))
    np.testing.assert_array_equal(loaded.buffer("enc.rm"), store.buffer("enc.rm"))
    # serialization is deterministic
    p2 = tmp_path / "ck2.lcdw"
    save_checkpoint(p2, store)
    assert p.read_bytes() == p2.read_bytes()


def test_sequential_shape_propagation_and_roundtrip():
    params = make_store(seed=0)
    enc = Sequential(
        [
            LayerSpec("conv2d", kernel_size=3, out_dim=4, stride=2, padding=1),
            LayerSpec("relu"),
            LayerSpec("batchnorm"),
        ],
        in_shape=(3, 8, 8),
        prefix="enc",
        params=params,
    )
    assert enc.out_shape == (4, 4, 4)
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    y, caches = enc.forward(params, x, "train")
    assert y.shape == (2, 4, 4, 4)
    gx = enc.backward(params, caches, np.ones_like(y))
    assert gx.shape == x.shape
