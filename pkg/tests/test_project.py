import numpy as np
import pytest
from hypothesis import given, strategies as st

from semrecon import synth
from semrecon.core import Intrinsics, Pose, look_at, pixel_index, project
from semrecon.evaluate import vertex_labels_from_samples
from semrecon.fusion import TsdfVolume
from semrecon.project import (DOT_CHANNELS, PYRAMID_CHANNELS, AggregatedVolume, ClassProbabilityProvider,
                              DoTWeights, FeatureImage, FileFeatureProvider, IntersectionMask, Slab,
                              aggregate_dot, fuse_embeddings, intersection_mask, label_vote_fusion,
                              project_features, read_feature_raster, stack_views, write_feature_raster)
from semrecon.segment2d import segment_frame

from dot_oracle import dense_reference, grid as _grid

K = Intrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)


def brute_mask(points, pose, K, depth, labels, eps):
    out = np.zeros(len(points), bool)
    for i, p in enumerate(points):
        px = project(K, pose, p)
        if px is None:
            continue
        u, v = int(pixel_index(px.u)), int(pixel_index(px.v))
        d = depth[v, u]
        out[i] = d > 0 and abs(px.depth - d) <= eps and labels[v, u] > 0
    return out


def test_mask_on_surface_and_occluded():
    depth = np.full((48, 64), 2.0)
    labels = np.ones((48, 64), np.int32)
    pts = np.array([[0, 0, 2.0], [0, 0, 2.5], [0, 0, 1.98]])
    m = intersection_mask(pts, Pose(), K, depth, labels, 0.075)
    assert m.mask.tolist() == [True, False, True]
    assert m.pixel[0] == 24 * 64 + 32 and m.pixel[1] == -1
    labels[24, 32] = 0
    assert not intersection_mask(pts, Pose(), K, depth, labels, 0.075).mask.any()


def test_mask_raster_mismatch():
    with pytest.raises(ValueError):
        intersection_mask(np.zeros((1, 3)), Pose(), K, np.ones((10, 10)), np.ones((10, 10)), 0.1)


@pytest.mark.parametrize("seed", range(3))
def test_mask_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(1, 3, (48, 64)) * (rng.random((48, 64)) > 0.1)
    labels = (rng.random((48, 64)) > 0.3).astype(np.int32)
    pose = look_at(rng.normal(0, 0.2, 3), (0, 0, 2), up=(0, -1, 0))
    # half the points near the observed surface, half anywhere
    pc = np.stack([rng.uniform(-1.5, 1.5, 2000), rng.uniform(-1.2, 1.2, 2000), rng.uniform(-0.5, 4, 2000)], 1)
    pts = pose.flipped().apply(pc)
    eps = 0.3
    m = intersection_mask(pts, pose, K, depth, labels, eps)
    assert np.array_equal(m.mask, brute_mask(pts, pose, K, depth, labels, eps))
    assert m.mask.sum() > 20


def _mask_all(n, K=K):
    return IntersectionMask(np.ones(n, bool), np.zeros(n, np.int64), K.width, K.height)


def test_constant_features():
    feat = FeatureImage(np.full((24, 32, 5), 0.25, np.float32))
    pts = np.array([[0, 0, 1.0], [0.1, 0.1, 2.0]])
    s = project_features(feat, _mask_all(2), pts, Pose(), K)
    assert s.rows.tolist() == [0, 1] and np.all(s.values == 0.25)


def test_all_false_mask_empty_slab():
    feat = FeatureImage(np.ones((48, 64, 3), np.float32))
    m = IntersectionMask(np.zeros(4, bool), np.full(4, -1), 64, 48)
    s = project_features(feat, m, np.ones((4, 3)), Pose(), K)
    assert s.values.shape == (0, 3) and s.dense().shape == (4, 3) and not s.dense().any()


@pytest.mark.parametrize("scale", [1, 2, 4])
def test_ramp_features_match_brute_force(scale, rng):
    h, w = 48 // scale, 64 // scale
    ramp = (np.arange(h)[:, None, None] * 1000 + np.arange(w)[None, :, None] + np.zeros((1, 1, 2))).astype(np.float32)
    pts = np.stack([rng.uniform(-0.5, 0.5, 300), rng.uniform(-0.4, 0.4, 300), rng.uniform(1, 2, 300)], 1)
    mask = intersection_mask(pts, Pose(), K, np.ones((48, 64)) * 5, np.ones((48, 64)), 10.0)
    s = project_features(FeatureImage(ramp), mask, pts, Pose(), K)
    for r, val in zip(s.rows, s.values):
        px = project(K, Pose(), pts[r])
        row = int(np.floor((px.v + 0.5) / scale))
        col = int(np.floor((px.u + 0.5) / scale))
        assert val[0] == row * 1000 + col


def test_feature_raster_limits():
    with pytest.raises(ValueError):
        FeatureImage(np.zeros((480, 640, 2), np.float32))
    with pytest.raises(ValueError):
        FeatureImage(np.zeros((10, 10, 2), np.float32), level=5)
    with pytest.raises(ValueError):
        project_features(FeatureImage(np.zeros((10, 10, 1), np.float32)), _mask_all(1),
                         np.ones((1, 3)), Pose(), K)


def _rand_slab(rng, n, c, p=0.5):
    rows = np.flatnonzero(rng.random(n) < p)
    return Slab(n, rows, rng.normal(size=(len(rows), c)).astype(np.float32))


def test_stack_single_view(rng):
    s = _rand_slab(rng, 30, 4)
    st_ = stack_views([s])
    assert np.array_equal(st_.dense()[:, :, 0], s.dense())
    assert np.array_equal(st_.slab(0).rows, s.rows)


def test_stack_disjoint_views():
    a = Slab(6, np.array([0, 2, 4]), np.ones((3, 2), np.float32))
    b = Slab(6, np.array([1, 3, 5]), np.ones((3, 2), np.float32))
    assert (stack_views([a, b]).occupancy().sum(axis=1) == 1).all()


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_stack_copy_oracle(views, seed):
    rng = np.random.default_rng(seed)
    slabs = [_rand_slab(rng, 20, 3) for _ in range(views)]
    dense = stack_views(slabs).dense()
    for v, s in enumerate(slabs):
        for n in range(20):
            expect = s.values[list(s.rows).index(n)] if n in s.rows else np.zeros(3)
            assert np.array_equal(dense[n, :, v], expect)


def test_stack_rejects_mismatch(rng):
    with pytest.raises(ValueError):
        stack_views([_rand_slab(rng, 5, 3), _rand_slab(rng, 6, 3)])
    with pytest.raises(ValueError):
        stack_views([])


def test_identity_profile_single_view(rng):
    coords = _grid(rng, 40)
    s = _rand_slab(rng, 40, 8)
    w = DoTWeights.identity(1, in_channels=8, out_channels=8)
    out = aggregate_dot(stack_views([s]), w, coords)
    assert np.array_equal(out.rows, s.rows)
    assert np.allclose(out.values, s.values, atol=0)


def test_max_over_views_dominance(rng):
    coords = _grid(rng, 10)
    f = np.abs(rng.normal(size=(1, 4))).astype(np.float32)
    a = Slab(10, np.array([3]), f)
    b = Slab(10, np.array([3]), 2 * f)
    out = aggregate_dot(stack_views([a, b]), DoTWeights.identity(1, 4, 4), coords)
    assert np.allclose(out.values[0], 2 * f[0])


@pytest.mark.parametrize("seed, pool", [(0, 1), (1, 1), (2, 3), (3, 1)])
def test_dot_matches_dense_reference(seed, pool):
    rng = np.random.default_rng(seed)
    side, n = 5, 64
    coords = _grid(rng, n, side)
    slabs = [_rand_slab(rng, n, 6, 0.6) for _ in range(3)]
    stack = stack_views(slabs)
    w = DoTWeights.random(1, seed=seed, in_channels=6, out_channels=5, pool_kernel=pool)
    got = aggregate_dot(stack, w, coords)
    ref, seen = dense_reference(stack, w, coords, side)
    assert np.array_equal(np.sort(got.rows), np.flatnonzero(seen[tuple(coords.T)]))
    assert np.abs(got.values - ref[tuple(coords[got.rows].T)]).max() < 1e-5


def test_dot_rejects_mismatch(rng):
    coords = _grid(rng, 10)
    st_ = stack_views([_rand_slab(rng, 10, 4)])
    with pytest.raises(ValueError):
        aggregate_dot(st_, DoTWeights.identity(1, 8, 8), coords)
    with pytest.raises(ValueError):
        aggregate_dot(st_, DoTWeights.identity(2, 4, 4), coords)
    with pytest.raises(ValueError):
        aggregate_dot(st_, DoTWeights.identity(1, 4, 4), coords[:5])


@pytest.mark.parametrize("level", [1, 2, 3, 4])
def test_channel_chain(level, rng):
    cin, cout = PYRAMID_CHANNELS[level], DOT_CHANNELS[level]
    coords = _grid(rng, 12, 3)
    feat = FeatureImage(rng.normal(size=(12, 16, cin)).astype(np.float32), level)
    feat.check_channels()
    rows = np.arange(0, 12, 2)
    s = Slab(12, rows, rng.normal(size=(6, cin)).astype(np.float32), level)
    w = DoTWeights.identity(level)
    assert (w.in_channels, w.out_channels) == (cin, cout)
    hat = aggregate_dot(stack_views([s, s]), w, coords)
    assert hat.channels == cout
    f3d = Slab(12, np.arange(12), rng.normal(size=(12, 7)).astype(np.float32))
    fused = fuse_embeddings(f3d, hat)
    assert fused.values.shape == (12, 7 + cout) and fused.split == 7


def test_fuse_empty_hat_zero_pads(rng):
    f3d = _rand_slab(rng, 10, 3)
    hat = AggregatedVolume(10, np.zeros(0, np.int64), np.zeros((0, 4), np.float32))
    fused = fuse_embeddings(f3d, hat)
    assert np.array_equal(fused.rows, f3d.rows)
    assert np.array_equal(fused.values[:, :3], f3d.values) and not fused.values[:, 3:].any()


def test_fuse_constants():
    f3d = Slab(4, np.arange(4), np.full((4, 2), 1.0, np.float32))
    hat = AggregatedVolume(4, np.arange(4), np.full((4, 3), 2.0, np.float32))
    assert np.array_equal(fuse_embeddings(f3d, hat).values, np.tile([1, 1, 2, 2, 2], (4, 1)))


@given(st.integers(0, 10_000))
def test_fuse_concat_oracle(seed):
    rng = np.random.default_rng(seed)
    a = _rand_slab(rng, 15, 2)
    b = _rand_slab(rng, 15, 3)
    hat = AggregatedVolume(15, b.rows, b.values)
    fused = fuse_embeddings(a, hat)
    da, db = a.dense(), b.dense()
    for r, row in zip(fused.rows, fused.values):
        assert np.array_equal(row, np.concatenate([da[r], db[r]]))
    assert set(fused.rows) == set(a.rows) | set(b.rows)


def test_vote_one_view_one_hot():
    s = Slab(3, np.array([1]), np.eye(8, dtype=np.float32)[[5]])
    m = IntersectionMask(np.array([False, True, False]), np.array([-1, 0, -1]), 64, 48)
    d = label_vote_fusion([s], [m])
    assert d[1].tolist() == np.eye(8)[5].tolist() and not d[0].any()


def test_vote_larger_mass_wins():
    m = IntersectionMask(np.array([True]), np.array([0]), 64, 48)
    a = Slab(1, np.array([0]), np.array([[0, 0.9, 0]], np.float32))
    b = Slab(1, np.array([0]), np.array([[0, 0, 0.6]], np.float32))
    d = label_vote_fusion([a, b], [m, m])
    assert d[0].argmax() == 1 and d[0].sum() == pytest.approx(1.0)


def test_vote_needs_class_count_without_views():
    with pytest.raises(ValueError):
        label_vote_fusion([], [])
    assert label_vote_fusion([], [], 5).shape == (0, 5)


def test_vote_three_object_scene(three_object):
    spec, R = three_object
    K = spec.intrinsics
    dets = synth.corrupt_detections(R.frames, spec.noise, spec.seed)
    vol = TsdfVolume(0.05)
    for fr in R.frames:
        vol.integrate(fr.depth, fr.pose, K)
    mesh = vol.extract_mesh()
    coords = np.unique(vol.voxel_of(mesh.vertices), axis=0)
    pts = vol.voxel_center(coords)
    prov = ClassProbabilityProvider()
    slabs, masks = [], []
    for fr, ds in zip(R.frames, dets):
        seg = segment_frame(fr.depth, K, ds)[2]
        feat = prov.features(fr.frame_id, seg.class_raster(), seg.probability_raster())
        m = intersection_mask(pts, fr.pose, K, fr.depth, seg.labels, 0.075)
        slabs.append(project_features(feat, m, pts, fr.pose, K))
        masks.append(m)
    dist = label_vote_fusion(slabs, masks)
    gt = vertex_labels_from_samples(pts, R.gt_points, R.gt_classes, 0.1)
    pred = np.where(dist.sum(1) > 0, dist.argmax(1), 0)
    seen = gt > 0
    agree = (pred == gt)[seen].mean()
    voted = seen & (pred > 0)
    print(f"surface voxels whose vote matches raycast GT: {agree:.4f}")
    assert (pred == gt)[voted].all()
    assert agree >= 0.95


def test_class_probability_provider():
    classes = np.zeros((480, 640), np.int32)
    classes[:, 320:] = 3
    probs = np.where(classes > 0, 0.8, 0.0)
    f = ClassProbabilityProvider(num_classes=5).features("x", classes, probs)
    assert f.data.shape == (240, 320, 5)
    assert f.data[0, 200, 3] == np.float32(0.8) and not f.data[0, 100].any()


def test_feature_raster_round_trip(tmp_path, rng):
    feat = FeatureImage(rng.normal(size=(6, 8, 3)).astype(np.float32), level=2)
    write_feature_raster(tmp_path / "f0_L2.feat", feat)
    back = read_feature_raster(tmp_path / "f0_L2.feat")
    assert back.level == 2 and np.array_equal(back.data, feat.data)
    assert np.array_equal(FileFeatureProvider(tmp_path, 2).features("f0").data, feat.data)
    with pytest.raises(FileNotFoundError):
        FileFeatureProvider(tmp_path, 3).features("f0")
    (tmp_path / "f0_L3.feat").write_bytes((tmp_path / "f0_L2.feat").read_bytes())
    with pytest.raises(ValueError):
        FileFeatureProvider(tmp_path, 3).features("f0")
    raw = (tmp_path / "f0_L2.feat").read_bytes()
    (tmp_path / "bad.feat").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_feature_raster(tmp_path / "bad.feat")


def test_dot_weights_round_trip(tmp_path):
    w = DoTWeights.random(3, seed=4, in_channels=5, out_channels=3, pool_kernel=3)
    w.save(tmp_path / "w.dotw")
    back = DoTWeights.load(tmp_path / "w.dotw")
    assert (back.level, back.kernel_size, back.pool_kernel) == (3, 3, 3)
    for a, b in zip(w.kernels + w.biases, back.kernels + back.biases):
        assert np.array_equal(a, b)
    (tmp_path / "x.dotw").write_bytes((tmp_path / "w.dotw").read_bytes() + b"\0")
    with pytest.raises(ValueError):
        DoTWeights.load(tmp_path / "x.dotw")


def test_dot_weights_validation():
    w = DoTWeights.identity(1, 4, 4)
    with pytest.raises(ValueError):
        DoTWeights(1, w.kernels, w.biases[:-1])
    with pytest.raises(ValueError):
        DoTWeights(1, [np.zeros((2, 2, 2, 4, 4), np.float32)], [np.zeros(4, np.float32)], kernel_size=2)
    with pytest.raises(ValueError):
        DoTWeights(1, [w.kernels[0], np.zeros((3, 3, 3, 5, 4), np.float32)], w.biases[:2])
