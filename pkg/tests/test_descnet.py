import numpy as np
import pytest

from crossdesc.descnet import (
    Descriptor,
    DualAutoEncoder,
    NetworkConfig,
    load_descriptors,
    save_descriptors,
    validate_image_patch,
    validate_point_patch,
)
from crossdesc.errors import ShapeError


def toy_config(seed=0, d=6, n=8):
    return NetworkConfig(
        embedding_dim=d,
        points_per_patch=n,
        patch_size=8,
        channels_2d=[3, 4],
        widths_3d_enc=[8, 16],
        widths_3d_dec=[8, 12],
        seed=seed,
    )


@pytest.fixture(scope="module")
def toy_model():
    return DualAutoEncoder(toy_config())


def rand_patch(rng, size=8):
    return rng.uniform(0.0, 1.0, size=(size, size, 3))


def rand_points(rng, n=8):
    pts = np.empty((n, 6))
    pts[:, :3] = rng.uniform(-1.0, 1.0, size=(n, 3))
    pts[:, 3:] = rng.uniform(0.0, 1.0, size=(n, 3))
    return pts


def test_encode_2d_shape_and_determinism(toy_model):
    rng = np.random.default_rng(0)
    patch = rand_patch(rng)
    d1 = toy_model.encode_2d(patch)
    d2 = toy_model.encode_2d(patch)
    assert isinstance(d1, Descriptor) and d1.domain_tag == "from_2d"
    assert d1.values.shape == (6,)
    np.testing.assert_array_equal(d1.values, d2.values)


def test_default_config_descriptor_length_is_256():
    cfg = NetworkConfig()
    assert cfg.embedding_dim == 256
    assert cfg.patch_size == 64 and cfg.points_per_patch == 1024


def test_encode_2d_rejects_wrong_size(toy_model):
    with pytest.raises(ShapeError):
        toy_model.encode_2d(np.zeros((9, 9, 3)))


def test_encode_3d_point_order_invariance(toy_model):
    rng = np.random.default_rng(1)
    pts = rand_points(rng)
    d1 = toy_model.encode_3d(pts)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(len(pts))
        d2 = toy_model.encode_3d(pts[perm])
        np.testing.assert_array_equal(d1.values, d2.values)


def test_encode_3d_rejects_wrong_count(toy_model):
    rng = np.random.default_rng(2)
    with pytest.raises(ShapeError):
        toy_model.encode_3d(rand_points(rng, n=9))


def test_decode_2d_range_and_shape(toy_model):
    rng = np.random.default_rng(3)
    for _ in range(5):
        desc = rng.standard_normal(6) * 3
        out = toy_model.decode_2d(desc)
        assert out.shape == (8, 8, 3)
        assert np.isfinite(out).all()
        assert out.min() >= 0.0 and out.max() <= 1.0
    zero = toy_model.decode_2d(np.zeros(6))
    validate_image_patch(zero, 8)


def test_decode_3d_range_and_shape(toy_model):
    rng = np.random.default_rng(4)
    for _ in range(5):
        desc = rng.standard_normal(6) * 3
        out = toy_model.decode_3d(desc)
        assert out.shape == (8, 6)
        validate_point_patch(out, 8)


def test_decode_rejects_dimension_mismatch(toy_model):
    with pytest.raises(ShapeError):
        toy_model.decode_2d(np.zeros(7))
    with pytest.raises(ShapeError):
        toy_model.decode_3d(np.zeros(5))


def test_shape_roundtrip_both_branches(toy_model):
    rng = np.random.default_rng(5)
    patch = rand_patch(rng)
    out = toy_model.decode_2d(toy_model.encode_2d(patch).values)
    assert out.shape == patch.shape
    pts = rand_points(rng)
    out3 = toy_model.decode_3d(toy_model.encode_3d(pts).values)
    assert out3.shape == pts.shape


def test_same_seed_same_network():
    a = DualAutoEncoder(toy_config(seed=7))
    b = DualAutoEncoder(toy_config(seed=7))
    assert a.params.params_bytes() == b.params.params_bytes()
    c = DualAutoEncoder(toy_config(seed=8))
    assert a.params.params_bytes() != c.params.params_bytes()


def test_outputs_finite_under_fuzz(toy_model):
    rng = np.random.default_rng(6)
    for _ in range(20):
        desc = rng.standard_normal(6) * rng.uniform(0, 20)
        assert np.isfinite(toy_model.decode_2d(desc)).all()
        assert np.isfinite(toy_model.decode_3d(desc)).all()
        patch = rand_patch(rng)
        assert np.isfinite(toy_model.encode_2d(patch).values).all()
        pts = rand_points(rng)
        assert np.isfinite(toy_model.encode_3d(pts).values).all()


def test_network_config_round_trips_through_dict():
    cfg = toy_config(seed=3)
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError, match="unknown"):
        NetworkConfig.from_dict({"embedding_dim": 4, "bogus": 1})


def test_descriptor_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    descs = rng.standard_normal((10, 6)).astype(np.float32)
    meta = rng.standard_normal((10, 2)).astype(np.float32)
    p = tmp_path / "d.lcdd"
    save_descriptors(p, descs, meta)
    assert p.read_bytes()[:4] == b"LCDD"
    d2, m2 = load_descriptors(p)
    np.testing.assert_array_equal(d2, descs)
    np.testing.assert_array_equal(m2, meta)
    # optional metadata block really is optional
    p2 = tmp_path / "d2.lcdd"
    save_descriptors(p2, descs)
    d3, m3 = load_descriptors(p2)
    np.testing.assert_array_equal(d3, descs)
    assert m3 is None
    # byte-determinism
    p3 = tmp_path / "d3.lcdd"
    save_descriptors(p3, descs, meta)
    assert p.read_bytes() == p3.read_bytes()
