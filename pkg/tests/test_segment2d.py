import numpy as np
import pytest
from hypothesis import given, strategies as st

from semrecon import synth
from semrecon.core import Intrinsics
from semrecon.ingest import Detection, DetectionSet
from semrecon.segment2d import (FilteredSeg, GeomSegmentation, SegmentParams, compute_normals,
                                dump_debug, filter_semantic, geometric_segment, segment_frame)

K = Intrinsics(100.0, 100.0, 39.5, 29.5, 80, 60)


def plane_depth(n, d, K=K):
    """Depth raster of the plane n.X = d seen from the origin."""
    v, u = np.indices((K.height, K.width), dtype=np.float64)
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1)
    return d / (rays @ np.asarray(n, float))


def test_fronto_parallel_normals():
    nm = compute_normals(np.full((60, 80), 2.0), K)
    assert nm.valid[1:-1, 1:-1].all() and not nm.valid[0].any()
    assert np.abs(nm.normals[nm.valid] - [0, 0, -1]).max() < 1e-3
    assert np.allclose(np.linalg.norm(nm.normals[nm.valid], axis=1), 1, atol=1e-4)


def test_neighbours_of_invalid_depth_are_invalid():
    depth = np.full((60, 80), 2.0)
    depth[30, 40] = 0
    nm = compute_normals(depth, K)
    for r, c in [(30, 40), (29, 40), (31, 40), (30, 39), (30, 41)]:
        assert not nm.valid[r, c]
    assert nm.valid[29, 39]


@pytest.mark.parametrize("axis", [0, 1])
def test_tilted_plane_normals(axis):
    a = np.deg2rad(30)
    n = np.array([0.0, 0.0, -np.cos(a)])
    n[axis] = np.sin(a)
    depth = plane_depth(-n, 2.0)  # plane n.X = -2, normal facing the camera
    nm = compute_normals(depth, K)
    assert np.abs(nm.normals[nm.valid] - n).max() < 1e-2


def test_two_planes_split_by_depth_step():
    depth = np.full((60, 80), 1.0)
    depth[:, 40:] = 2.0
    g = geometric_segment(compute_normals(depth, K), depth, SegmentParams(min_area=50))
    assert g.count == 2
    assert set(np.unique(g.instances[1:-1, 1:38])) == {1}


def test_single_plane_single_instance():
    depth = plane_depth([0.1, 0.2, 1.0], 2.0)
    nm = compute_normals(depth, K)
    g = geometric_segment(nm, depth)
    assert g.count == 1
    assert np.array_equal(g.covered, nm.valid)
    assert np.array_equal(g.instances > 0, g.covered)


def test_box_against_wall_faces_separate():
    spec = synth.SceneSpec(
        primitives=[synth.Plane((0, 2, 0.5), (0, -1, 0), 3.0, 1),
                    synth.Box((-0.3, 1.2, 0.2), (0.3, 2.0, 0.8), 3)],
        waypoints=[((0.9, -0.5, 1.4), (0.0, 1.6, 0.5))], frame_count=1)
    fr = synth.render(spec).frames[0]
    g = geometric_segment(compute_normals(fr.depth, spec.intrinsics), fr.depth)
    # every geometric instance is pure w.r.t. the raycast face id
    face = _face_ids(spec, fr)
    for k in range(1, g.count + 1):
        ids, cnt = np.unique(face[g.instances == k], return_counts=True)
        assert cnt.max() / cnt.sum() > 0.99
    wall_ids = set(np.unique(g.instances[(face == 0) & g.covered]))
    box_ids = set(np.unique(g.instances[(face > 0) & g.covered]))
    assert wall_ids and box_ids and not wall_ids & box_ids
    visible_faces = {f for f in np.unique(face[fr.instance == 2]) if (face == f).sum() > 500}
    assert len(visible_faces) >= 2
    for f in visible_faces:
        ids, cnt = np.unique(g.instances[(face == f) & g.covered], return_counts=True)
        assert len(box_ids & {ids[np.argmax(cnt)]}) == 1
    majority = {f: ids for f in visible_faces
                for ids in [np.bincount(g.instances[(face == f) & g.covered]).argmax()]}
    assert len(set(majority.values())) == len(visible_faces)


def _face_ids(spec, fr):
    """0 for the wall, 1..6 for the box face whose plane the hit point lies on."""
    from semrecon.core import unproject_depth
    P = fr.pose.flipped().apply(unproject_depth(spec.intrinsics, fr.depth).reshape(-1, 3))
    box = spec.primitives[1]
    face = np.zeros(len(P), np.int64)
    on_box = (fr.instance.ravel() == 2)
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    dist = np.concatenate([np.abs(P - lo), np.abs(P - hi)], axis=1)
    face[on_box] = dist[on_box].argmin(axis=1) + 1
    return face.reshape(fr.depth.shape)


@given(st.integers(1, 400), st.integers(1, 400))
def test_instance_count_monotone_in_min_area(a, b):
    depth = np.full((60, 80), 1.0)
    depth[:, 20:] = 1.5
    depth[:30, 60:] = 2.5
    depth[45:, 5:15] = 3.0
    nm = compute_normals(depth, K)
    lo, hi = sorted((a, b))
    assert geometric_segment(nm, depth, SegmentParams(min_area=hi)).count <= \
        geometric_segment(nm, depth, SegmentParams(min_area=lo)).count


def test_rerun_gives_identical_ids(three_object):
    spec, R = three_object
    fr = R.frames[3]
    a = geometric_segment(compute_normals(fr.depth, spec.intrinsics), fr.depth)
    b = geometric_segment(compute_normals(fr.depth, spec.intrinsics), fr.depth)
    assert np.array_equal(a.instances, b.instances)


def _geom(covered):
    return GeomSegmentation(covered, covered.astype(np.int32))


def test_detection_outside_coverage_removed():
    cov = np.zeros((10, 10), bool)
    cov[:, :5] = True
    m = np.zeros((10, 10), bool)
    m[:, 6:] = True
    fs = filter_semantic(DetectionSet("f", [Detection(3, 0.9, m)]), _geom(cov))
    assert fs.instances == [] and not fs.labels.any()


def test_detection_inside_one_instance_unchanged():
    cov = np.ones((10, 10), bool)
    m = np.zeros((10, 10), bool)
    m[2:6, 3:7] = True
    fs = filter_semantic(DetectionSet("f", [Detection(3, 0.8, m)]), _geom(cov))
    assert np.array_equal(fs.mask(1), m)
    assert fs.instances[0].class_id == 3 and fs.instances[0].probability == 0.8
    assert fs.instances[0].pixel_count == 16


def test_straddling_detection_matches_pixel_and(rng):
    cov = rng.random((30, 40)) > 0.4
    m = np.zeros((30, 40), bool)
    m[5:25, 10:30] = True
    fs = filter_semantic(DetectionSet("f", [Detection(5, 0.7, m)]), _geom(cov))
    expect = sum(m[i, j] and cov[i, j] for i in range(30) for j in range(40))
    assert fs.instances[0].pixel_count == expect == int(fs.mask(1).sum())


def test_overlap_priority():
    cov = np.ones((4, 4), bool)
    full = np.ones((4, 4), bool)
    dets = [Detection(9, 0.5, full), Detection(4, 0.8, full), Detection(2, 0.8, full)]
    fs = filter_semantic(DetectionSet("f", dets), _geom(cov))
    assert [i.class_id for i in fs.instances] == [2]
    assert fs.instances[0].source_index == 2


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        filter_semantic(DetectionSet("f", [Detection(1, 0.5, np.ones((3, 3), bool))]),
                        _geom(np.ones((4, 4), bool)))


def test_rasters_and_copy():
    labels = np.array([[0, 1], [2, 2]])
    from semrecon.segment2d import SegInstance
    fs = FilteredSeg(labels, [SegInstance(3, 0.9, 1), SegInstance(7, 0.5, 2)])
    assert fs.class_raster().tolist() == [[0, 3], [7, 7]]
    assert fs.probability_raster().tolist() == [[0, 0.9], [0.5, 0.5]]
    c = fs.copy()
    c.instances[0].class_id = 1
    c.labels[0, 0] = 2
    assert fs.instances[0].class_id == 3 and fs.labels[0, 0] == 0


def test_segment_frame_and_debug_dump(tmp_path, three_object):
    spec, R = three_object
    fr = R.frames[0]
    dets = synth.corrupt_detections([fr], spec.noise, 0)[0]
    nm, g, fs = segment_frame(fr.depth, spec.intrinsics, dets)
    assert not (fs.labels > 0)[~g.covered].any()
    dump_debug(tmp_path, fr.frame_id, nm, g)
    assert (tmp_path / f"{fr.frame_id}_normals.png").exists()
    assert (tmp_path / f"{fr.frame_id}_instances.png").exists()
