import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semrecon.evaluate import (EvalReport, nearest_distances, recon_error, semantic_scores,
                               vertex_labels_from_samples)
from semrecon.fusion import Mesh


def plane_grid(spacing=0.01, half=0.5, z=0.0):
    a = np.arange(-half, half + 1e-9, spacing)
    x, y = np.meshgrid(a, a)
    return np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], 1)


def test_self_samples_zero():
    gt = plane_grid()
    assert recon_error(Mesh(gt, np.zeros((0, 3), np.int64)), gt) == 0.0


def test_one_centimetre_offset(rng):
    gt = plane_grid(0.001, 0.5)
    verts = np.stack([rng.uniform(-0.4, 0.4, 500), rng.uniform(-0.4, 0.4, 500), np.full(500, 0.01)], 1)
    assert recon_error(verts, gt) == pytest.approx(1.0, abs=0.01)


@pytest.mark.parametrize("t, expect", [
    ((0, 0, 0.02), 2.0),
    ((0.01, 0.02, -0.007), 0.7),  # whole-spacing slide lands on other samples
    ((0.003, -0.004, 0.015), np.hypot(0.5, 1.5)),  # sub-spacing slide keeps the same sample
])
def test_translation_raises_error_by_normal_component(t, expect):
    gt = plane_grid(0.01, 0.5)
    verts = plane_grid(0.01, 0.3)
    T = np.eye(4)
    T[:3, 3] = t
    assert recon_error(verts, gt, transform=T) == pytest.approx(expect, abs=1e-9)


def test_kdtree_matches_brute_force(rng):
    gt = rng.normal(size=(700, 3))
    verts = rng.normal(size=(150, 3))
    fast = nearest_distances(verts, gt)
    slow = nearest_distances(verts, gt, brute_force=True, chunk=37)
    oracle = np.array([min(np.linalg.norm(v - g) for g in gt) for v in verts])
    assert np.abs(fast - oracle).max() < 1e-9 and np.abs(slow - oracle).max() < 1e-9
    assert recon_error(verts, gt, brute_force=True) == pytest.approx(oracle.mean() * 100, abs=1e-9)


def test_recon_error_rejects_empty():
    with pytest.raises(ValueError):
        recon_error(np.zeros((0, 3)), plane_grid())
    with pytest.raises(ValueError):
        recon_error(plane_grid(), np.zeros((0, 3)))


def test_perfect_prediction(rng):
    gt = rng.integers(0, 6, 300)
    r = semantic_scores(gt, gt)
    assert r.miou == 1.0 and r.macc == 1.0


def test_binary_half_flip():
    gt = np.array([1] * 100 + [2] * 100)
    pred = gt.copy()
    pred[:50] = 2
    r = semantic_scores(pred, gt)
    assert r.class_iou[1] == 0.5 and r.class_acc[1] == 0.5
    assert r.class_iou[2] == pytest.approx(100 / 150) and r.class_acc[2] == 1.0


def test_absent_classes_excluded():
    gt = np.array([0, 1, 1, 2, 2])
    pred = np.array([4, 1, 1, 2, 2])
    r = semantic_scores(pred, gt, num_classes=6)
    assert sorted(r.class_iou) == [1, 2] and r.miou == 1.0
    assert r.metadata["excluded_classes"] == [3, 4, 5]


def test_unannotated_vertices_ignored():
    r = semantic_scores(np.array([3, 1]), np.array([0, 1]))
    assert r.miou == 1.0 and r.class_counts == {1: 1}


def test_score_errors():
    with pytest.raises(ValueError):
        semantic_scores(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        semantic_scores(np.array([7]), np.array([1]), num_classes=3)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=80), st.integers(0, 999))
def test_score_properties(pairs, seed):
    pred, gt = np.array(pairs).T
    r = semantic_scores(pred, gt, 5)
    perm = np.random.default_rng(seed).permutation(len(pred))
    r2 = semantic_scores(pred[perm], gt[perm], 5)
    assert r.class_iou == r2.class_iou and r.class_acc == r2.class_acc
    for c in r.class_iou:
        assert 0 <= r.class_iou[c] <= r.class_acc[c] <= 1
    if r.miou is not None:
        assert r.macc >= r.miou


def test_report_serialisation():
    r = semantic_scores(np.array([1, 2, 2]), np.array([1, 2, 1]))
    r.recon_error_cm = 1.5
    d = json.loads(r.to_json())
    assert d["class_iou"] == {"1": 0.5, "2": 0.5} and d["recon_error_cm"] == 1.5
    lines = r.table().splitlines()
    assert lines[0].startswith("reconstruction error") and lines[-1].split()[0] == "mean"
    assert EvalReport().table() == ""


def test_vertex_labels_from_samples():
    samples = np.array([[0, 0, 0], [1, 0, 0.0]])
    v = np.array([[0.1, 0, 0], [0.9, 0, 0], [5, 5, 5]])
    assert vertex_labels_from_samples(v, samples, [3, 7], 0.2).tolist() == [3, 7, 0]
    assert len(vertex_labels_from_samples(np.zeros((0, 3)), samples, [3, 7], 0.2)) == 0
