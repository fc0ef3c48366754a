import numpy as np
import pytest

from crossdesc.datagen.camera import Pose, look_at
from crossdesc.descnet import DualAutoEncoder, NetworkConfig
from crossdesc.errors import DataError
from crossdesc.retrieval import (
    Codebook,
    OraclePositionEncoder,
    PlaceEntry,
    VladVector,
    crop_patch,
    grid_centers,
    kmeans_fit,
    load_index,
    occupied_cells,
    query,
    recall_at_n,
    sample_image_descriptors,
    sample_submap_descriptors,
    save_index,
    vlad_aggregate,
)


def toy_model():
    return DualAutoEncoder(
        NetworkConfig(
            embedding_dim=8,
            points_per_patch=16,
            patch_size=16,
            channels_2d=[4, 8],
            widths_3d_enc=[16, 32],
            widths_3d_dec=[16, 32],
            seed=0,
        )
    )


# -- kmeans ------------------------------------------------------------------


def test_kmeans_k1_is_mean():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 5))
    cb = kmeans_fit(x, k=1, seed=0)
    np.testing.assert_allclose(cb.centroids[0], x.mean(axis=0), atol=1e-12)


def test_kmeans_two_separated_clusters():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 0.05, (50, 4))
    b = rng.normal(10, 0.05, (50, 4))
    x = np.concatenate([a, b])
    cb = kmeans_fit(x, k=2, seed=3)
    got = sorted(cb.centroids[:, 0])
    assert abs(got[0] - a[:, 0].mean()) < 1e-6
    assert abs(got[1] - b[:, 0].mean()) < 1e-6


def test_kmeans_deterministic():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((100, 6))
    cb1 = kmeans_fit(x, k=8, seed=7)
    cb2 = kmeans_fit(x, k=8, seed=7)
    np.testing.assert_array_equal(cb1.centroids, cb2.centroids)


def test_kmeans_needs_enough_points():
    with pytest.raises(DataError):
        kmeans_fit(np.zeros((3, 4)), k=8)


# -- vlad --------------------------------------------------------------------


def test_vlad_single_descriptor_single_centroid():
    cb = Codebook(centroids=np.zeros((1, 4)), seed=0)
    v = np.array([[3.0, 0.0, 4.0, 0.0]])
    out = vlad_aggregate(v, cb)
    np.testing.assert_allclose(out.values, v[0] / 5.0, atol=1e-7)
    assert not out.degenerate


def test_vlad_zero_residuals_degenerate():
    cb = Codebook(centroids=np.array([[1.0, 2.0], [5.0, 5.0]]), seed=0)
    descs = np.array([[1.0, 2.0], [5.0, 5.0]])
    out = vlad_aggregate(descs, cb)
    assert out.degenerate
    np.testing.assert_array_equal(out.values, 0.0)


def test_vlad_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        descs = rng.standard_normal((20, 6))
        cb = Codebook(centroids=rng.standard_normal((4, 6)), seed=0)
        got = vlad_aggregate(descs, cb)
        # oracle: per-descriptor nearest centroid, residual accumulation
        blocks = np.zeros((4, 6))
        for d in descs:
            dists = [float(np.linalg.norm(d - c)) for c in cb.centroids]
            j = int(np.argmin(dists))
            blocks[j] += d - cb.centroids[j]
        for j in range(4):
            n = np.linalg.norm(blocks[j])
            if n > 0:
                blocks[j] /= n
        flat = blocks.ravel()
        flat /= np.linalg.norm(flat)
        np.testing.assert_allclose(got.values, flat, atol=1e-7)


def test_vlad_input_order_invariance():
    rng = np.random.default_rng(4)
    descs = rng.standard_normal((30, 5))
    cb = Codebook(centroids=rng.standard_normal((3, 5)), seed=0)
    a = vlad_aggregate(descs, cb)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(30)
        b = vlad_aggregate(descs[perm], cb)
        np.testing.assert_allclose(a.values, b.values, atol=1e-7)


def test_vlad_rejects_empty():
    cb = Codebook(centroids=np.zeros((1, 4)), seed=0)
    with pytest.raises(DataError):
        vlad_aggregate(np.zeros((0, 4)), cb)


# -- sampling ------------------------------------------------------------------


def test_submap_sampling_single_cell():
    rng = np.random.default_rng(5)
    cloud = np.empty((200, 6), dtype=np.float32)
    cloud[:, :3] = rng.uniform(0.05, 0.45, (200, 3))
    cloud[:, 3:] = rng.uniform(0, 1, (200, 3))
    model = toy_model()
    descs, centers = sample_submap_descriptors(cloud, model, grid=0.5, radius=0.5)
    assert descs.shape == (1, 8)
    np.testing.assert_allclose(centers[0], [0.25, 0.25, 0.25])


def test_submap_descriptor_count_matches_occupancy_oracle():
    rng = np.random.default_rng(6)
    cloud = np.empty((5000, 6), dtype=np.float32)
    cloud[:, :3] = rng.uniform(0, 2, (5000, 3))
    cloud[:, 3:] = rng.uniform(0, 1, (5000, 3))
    model = toy_model()
    grid = 1.0
    descs, centers = sample_submap_descriptors(cloud, model, grid=grid, radius=1.0)
    # reference voxel hash
    expected_cells = {tuple(c) for c in np.floor(cloud[:, :3] / grid).astype(int)}
    assert len(descs) == len(expected_cells)


def test_occupied_cells_sorted_and_unique():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0.0, 0.0]])
    cells = occupied_cells(pts, 1.0)
    assert cells.shape == (2, 3)
    assert (cells[0] <= cells[1]).all()


def test_image_grid_counts_and_centers():
    model = toy_model()
    img = np.random.default_rng(7).uniform(0, 1, (128, 128, 3)).astype(np.float32)
    descs, centers = sample_image_descriptors(img, model, grid_rows=8, grid_cols=8)
    assert descs.shape == (64, 8)
    # arithmetic-progression oracle
    expected = np.floor((np.arange(8) + 0.5) * 128 / 8).astype(int)
    np.testing.assert_array_equal(np.unique(centers[:, 0]), expected)
    np.testing.assert_array_equal(grid_centers(128, 8), expected)


def test_constant_image_identical_descriptors():
    model = toy_model()
    img = np.full((64, 64, 3), 0.4, dtype=np.float32)
    descs, _ = sample_image_descriptors(img, model, grid_rows=3, grid_cols=3)
    for i in range(1, len(descs)):
        np.testing.assert_array_equal(descs[0], descs[i])


def test_image_smaller_than_patch_rejected():
    model = toy_model()
    with pytest.raises(DataError):
        sample_image_descriptors(np.zeros((8, 8, 3), dtype=np.float32), model)


def test_crop_patch_edge_replication():
    img = np.arange(25, dtype=np.float32).reshape(5, 5, 1) * np.ones((1, 1, 3))
    patch = crop_patch(img, 0, 0, 4)
    assert patch.shape == (4, 4, 3)
    assert patch[0, 0, 0] == img[0, 0, 0]  # clamped corner


# -- query and recall -----------------------------------------------------------


def make_entry(sid, vec, pose=None):
    v = np.zeros(8, dtype=np.float32)
    v[: len(vec)] = vec
    v /= np.linalg.norm(v)
    return PlaceEntry(sid, VladVector(v), pose or Pose(np.eye(3), np.zeros(3)))


def test_query_exact_hit_ranks_first():
    db = [make_entry("a", [1, 0]), make_entry("b", [0, 1]), make_entry("c", [1, 1])]
    res = query(db, db[1].vlad, n=2)
    assert res[0][0] == "b" and res[0][1] == 0.0


def test_query_clamps_to_db_size():
    db = [make_entry("a", [1, 0]), make_entry("b", [0, 1])]
    res = query(db, db[0].vlad, n=10)
    assert len(res) == 2


def test_query_matches_full_sort_oracle():
    rng = np.random.default_rng(8)
    db = []
    for i in range(100):
        v = rng.standard_normal(8).astype(np.float32)
        v /= np.linalg.norm(v)
        db.append(PlaceEntry(f"s{i:03d}", VladVector(v), Pose(np.eye(3), np.zeros(3))))
    q = VladVector(db[17].vlad.values + 0.01)
    res = query(db, q, n=100)
    oracle = sorted(
        ((float(np.linalg.norm(e.vlad.values.astype(np.float64) - q.values.astype(np.float64))), e.submap_id) for e in db)
    )
    assert [sid for sid, _ in res] == [sid for _, sid in oracle]


def poses_apart(dist=0.0, angle_deg=0.0):
    # identity base; second pose rotated about z by angle, center moved by dist
    base = Pose(np.eye(3), np.zeros(3))
    th = np.deg2rad(angle_deg)
    rz = np.array(
        [[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]]
    )
    c2 = np.array([0.0, 0.0, dist])
    return base, Pose(rz, -rz @ c2)


def test_recall_exact_pose_correct_at_one():
    qa, _ = poses_apart()
    entries = {"a": qa}
    out = recall_at_n([["a"]], [qa], entries, ns=[1])
    assert out["recall"][1] == 1.0


def test_recall_distance_threshold():
    qa, far = poses_apart(dist=0.6)
    out = recall_at_n([["a"]], [far], {"a": qa}, ns=[1])
    assert out["recall"][1] == 0.0


def test_recall_inclusive_rotation_boundary():
    qa, rot = poses_apart(angle_deg=30.0)
    out = recall_at_n([["a"]], [rot], {"a": qa}, ns=[1])
    assert out["recall"][1] == 1.0
    _, rot31 = poses_apart(angle_deg=31.0)
    out = recall_at_n([["a"]], [rot31], {"a": qa}, ns=[1])
    assert out["recall"][1] == 0.0


def test_recall_monotone_in_n():
    rng = np.random.default_rng(9)
    qa, _ = poses_apart()
    entry_poses = {}
    rankings = []
    for qi in range(10):
        ranked = []
        for j in range(10):
            sid = f"e{qi}_{j}"
            dist = float(rng.uniform(0, 1.2))
            _, p = poses_apart(dist=dist)
            entry_poses[sid] = p
            ranked.append(sid)
        rankings.append(ranked)
    out = recall_at_n(rankings, [qa] * 10, entry_poses, ns=list(range(1, 11)))
    vals = [out["recall"][n] for n in range(1, 11)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_recall_missing_pose_excluded():
    qa, _ = poses_apart()
    out = recall_at_n([["a"], ["a"]], [qa, None], {"a": qa}, ns=[1])
    assert out["excluded"] == 1 and out["queries"] == 1


# -- oracle encoder + index io -------------------------------------------------------


def test_oracle_encoder_locality():
    enc = OraclePositionEncoder(dim=16)
    p = np.array([[0.0, 0.0, 0.0]])
    near = enc.encode(p + 0.01)
    far = enc.encode(p + 5.0)
    base = enc.encode(p)
    assert np.linalg.norm(near - base) < np.linalg.norm(far - base)


def test_index_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    cb = Codebook(centroids=rng.standard_normal((4, 8)), seed=5)
    entries = []
    for i in range(6):
        v = rng.standard_normal(32).astype(np.float32)
        v /= np.linalg.norm(v)
        entries.append(
            PlaceEntry(f"sub{i}", VladVector(v), look_at(rng.uniform(-2, 2, 3), [0, 0, 0]))
        )
    p = tmp_path / "db.lcdv"
    save_index(p, cb, entries)
    assert p.read_bytes()[:4] == b"LCDV"
    cb2, loaded = load_index(p)
    np.testing.assert_allclose(cb2.centroids, cb.centroids, atol=1e-7)
    assert [e.submap_id for e in loaded] == [e.submap_id for e in entries]
    np.testing.assert_array_equal(loaded[2].vlad.values, entries[2].vlad.values)
    np.testing.assert_allclose(loaded[3].pose.matrix(), entries[3].pose.matrix(), atol=0)
    # determinism
    p2 = tmp_path / "db2.lcdv"
    save_index(p2, cb, entries)
    assert p.read_bytes() == p2.read_bytes()
