import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semrecon import synth
from semrecon.core import Intrinsics, Pose
from semrecon.fusion import BLOCK, Mesh, TsdfVolume, VoxelLabels, transfer_labels

K = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def plane_frames(n, sigma, seed=0):
    spec = synth.plane_scene(distance=1.0, frame_count=n, depth_sigma=sigma, seed=seed)
    return synth.render(spec)


def zero_crossings(vol, max_lateral):
    """Interpolated zero crossing along y for each voxel column near the axis.

    The plane scene looks along +y, so columns run along the grid y axis.
    """
    g, tsdf, w = vol.voxels()
    out = []
    cols = {}
    for (i, j, k), s in zip(g.tolist(), tsdf.tolist()):
        cols.setdefault((i, k), {})[j] = s
    for (i, k), col in cols.items():
        x, z = vol.voxel_center((i, 0, k))[[0, 2]]
        if abs(x) > max_lateral or abs(z - 1.0) > max_lateral:
            continue
        js = sorted(col)
        for a, b in zip(js, js[1:]):
            if b == a + 1 and col[a] > 0 >= col[b]:
                ya, yb = vol.voxel_center((0, a, 0))[1], vol.voxel_center((0, b, 0))[1]
                out.append(ya + (yb - ya) * col[a] / (col[a] - col[b]))
    return np.array(out)


def test_single_frame_plane_zero_crossing():
    R = plane_frames(1, 0.0)
    vol = TsdfVolume(0.02)
    vol.integrate(R.frames[0].depth, R.frames[0].pose, R.intrinsics)
    zc = zero_crossings(vol, 0.3)
    assert len(zc) > 100
    assert np.abs(zc - 1.0).max() <= 0.01


def test_noisy_plane_twenty_frames():
    R = plane_frames(20, 0.005)
    vol = TsdfVolume(0.02)
    for fr in R.frames:
        vol.integrate(fr.depth, fr.pose, R.intrinsics)
    mesh = vol.extract_mesh()
    central = mesh.vertices[(np.abs(mesh.vertices[:, 0]) < 0.3) & (np.abs(mesh.vertices[:, 2] - 1) < 0.3)]
    assert len(central) > 100
    assert np.abs(central[:, 1] - 1.0).mean() < 0.002


def test_tsdf_range_and_weights():
    R = plane_frames(3, 0.003)
    vol = TsdfVolume(0.05, w_max=2)
    for fr in R.frames:
        vol.integrate(fr.depth, fr.pose, R.intrinsics)
    _, tsdf, w = vol.voxels()
    assert np.abs(tsdf).max() <= 1.0
    assert w.min() > 0 and w.max() == 2.0


def test_double_integration_fixed_point():
    fr = plane_frames(1, 0.0).frames[0]
    a, b = TsdfVolume(0.05), TsdfVolume(0.05)
    a.integrate(fr.depth, fr.pose, K)
    b.integrate(fr.depth, fr.pose, K)
    b.integrate(fr.depth, fr.pose, K)
    ga, ta, wa = a.voxels()
    gb, tb, wb = b.voxels()
    assert np.array_equal(ga, gb) and np.array_equal(ta, tb)
    assert np.array_equal(wb, 2 * wa)


def test_weight_capped():
    fr = plane_frames(1, 0.0).frames[0]
    vol = TsdfVolume(0.05, w_max=3)
    for _ in range(5):
        vol.integrate(fr.depth, fr.pose, K)
    assert vol.voxels()[2].max() == 3.0


def test_order_invariance(three_object):
    spec, R = three_object
    frames = R.frames[:5]
    ref = TsdfVolume(0.05)
    for fr in frames:
        ref.integrate(fr.depth, fr.pose, spec.intrinsics)
    g0, t0, w0 = ref.voxels()
    order0 = np.lexsort(g0.T[::-1])
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        vol = TsdfVolume(0.05)
        for i in perm:
            vol.integrate(frames[i].depth, frames[i].pose, spec.intrinsics)
        g, t, w = vol.voxels()
        order = np.lexsort(g.T[::-1])
        assert np.array_equal(g[order], g0[order0])
        assert np.abs(t[order] - t0[order0]).max() <= 1e-6
        assert np.array_equal(w[order], w0[order0])


def test_invalid_depth_skipped():
    vol = TsdfVolume(0.05)
    assert vol.integrate(np.zeros((480, 640)), Pose(), K) == 0
    assert vol.num_blocks == 0
    depth = np.zeros((480, 640))
    depth[200:280, 300:340] = 1.5
    vol.integrate(depth, Pose(), K)
    assert 0 < vol.num_blocks < 30


def test_pose_convention_checked():
    with pytest.raises(ValueError):
        TsdfVolume(0.05).integrate(np.ones((480, 640)), Pose().flipped(), K)


def test_blocks_scale_with_surface_area():
    fr = plane_frames(1, 0.0).frames[0]
    vol = TsdfVolume(0.05)
    vol.integrate(fr.depth, fr.pose, K)
    # visible wall is about 1.22 x 0.91 m; blocks are 0.4 m across and the
    # 0.2 m band plus a margin block spans at most 3-4 block layers
    area_blocks = (1.22 / 0.4 + 2) * (0.91 / 0.4 + 2)
    assert vol.num_blocks <= 4 * area_blocks


def test_empty_volume_gives_empty_mesh():
    m = TsdfVolume(0.05).extract_mesh()
    assert m.vertices.shape == (0, 3) and m.faces.shape == (0, 3)


def test_single_inside_corner_gives_one_triangle():
    vol = TsdfVolume(0.1)
    vol.write_sdf(lambda p: np.where(np.linalg.norm(p, axis=1) < 1e-9, -0.05, 0.05),
                  [0, 0, 0], [0.1, 0.1, 0.1])
    m = vol.extract_mesh()
    assert len(m.faces) == 1 and len(m.vertices) == 3
    assert np.allclose(np.sort(m.vertices.sum(axis=1)), 0.05)


def sphere_mesh(voxel=0.01, r=0.5):
    vol = TsdfVolume(voxel)
    vol.write_sdf(lambda p: np.linalg.norm(p, axis=1) - r, [-r - 0.1] * 3, [r + 0.1] * 3)
    return vol.extract_mesh()


def test_sphere_radial_error_and_orientation():
    m = sphere_mesh()
    err = np.abs(np.linalg.norm(m.vertices, axis=1) - 0.5)
    assert err.mean() < 0.005 and err.max() < 0.01
    tri = m.vertices[m.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert ((n * tri.mean(axis=1)).sum(axis=1) > 0).all()


def test_mesh_invariants():
    m = sphere_mesh(0.02)
    assert np.isfinite(m.vertices).all()
    assert m.faces.min() >= 0 and m.faces.max() < len(m.vertices)
    assert (m.triangle_areas() > 0).all()
    # welded: a closed sphere has every edge shared by exactly two faces
    e = np.sort(np.concatenate([m.faces[:, [0, 1]], m.faces[:, [1, 2]], m.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert (counts == 2).all()
    d = np.linalg.norm(m.vertices[:, None] - m.vertices[None], axis=-1) if len(m.vertices) < 3000 else None
    if d is not None:
        np.fill_diagonal(d, 1)
        assert d.min() > 1e-6


@settings(max_examples=10)
@given(st.floats(0.3, 0.9), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_offset_plane_vertices_within_voxel(dist, dx, dz):
    vol = TsdfVolume(0.05)
    vol.write_sdf(lambda p: dist - p[:, 1], [-0.5, dist - 0.3, -0.5], [0.5, dist + 0.3, 0.5])
    m = vol.extract_mesh()
    assert len(m.faces) and np.abs(m.vertices[:, 1] - dist).max() < 1e-5


def test_voxel_index_convention():
    vol = TsdfVolume(0.1)
    assert vol.voxel_of([[0.049, 0, 0], [0.05, 0, 0], [-0.051, 0, 0]])[:, 0].tolist() == [0, 1, -1]
    assert np.allclose(vol.voxel_center([[1, 2, 3]]), [[0.1, 0.2, 0.3]])
    assert BLOCK == 8


def _labels_for(mesh, vol, fn):
    g = np.unique(vol.voxel_of(mesh.vertices), axis=0)
    return VoxelLabels(g, fn(vol.voxel_center(g)), vol.voxel_size, vol.origin)


def test_transfer_all_one_class():
    vol = TsdfVolume(0.05)
    vol.write_sdf(lambda p: np.linalg.norm(p, axis=1) - 0.3, [-0.4] * 3, [0.4] * 3)
    m = vol.extract_mesh()
    lab = _labels_for(m, vol, lambda c: np.tile(np.eye(6)[4], (len(c), 1)))
    assert (transfer_labels(m, lab).classes == 4).all()
    assert (transfer_labels(m, None).classes == 0).all()
    assert (transfer_labels(m, np.zeros((len(m.vertices), 6))).classes == 0).all()


def test_transfer_two_regions_except_boundary():
    vol = TsdfVolume(0.05)
    vol.write_sdf(lambda p: np.linalg.norm(p, axis=1) - 0.4, [-0.5] * 3, [0.5] * 3)
    m = vol.extract_mesh()
    lab = _labels_for(m, vol, lambda c: np.where((c[:, 0] < 0)[:, None], np.eye(3)[1], np.eye(3)[2]))
    got = transfer_labels(m, lab).classes
    gt = np.where(m.vertices[:, 0] < 0, 1, 2)
    far = np.abs(m.vertices[:, 0]) > 0.05
    assert (got[far] == gt[far]).all()


def test_transfer_fallback_radius():
    # labelled voxel (1, 0, 0); vertices in voxel 0 (adjacent) and voxel 10 (far)
    lab = VoxelLabels(np.array([[1, 0, 0]]), np.array([[0.0, 1.0]]), 0.1, np.zeros(3))
    m = Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.1, 0, 0]]), np.zeros((0, 3), np.int64))
    assert transfer_labels(m, lab).classes.tolist() == [0, 0, 1]
    assert transfer_labels(m, lab, fallback_radius=1).classes.tolist() == [1, 0, 1]


def test_per_vertex_length_checked():
    m = Mesh(np.zeros((2, 3)), np.zeros((0, 3), np.int64))
    with pytest.raises(ValueError):
        transfer_labels(m, np.zeros((3, 2)))
