"""Reconstruction error and semantic segmentation scores."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .fusion import Mesh

RECON_CONVENTION = "mean nearest-neighbour distance, reconstruction vertices -> ground-truth samples"


def nearest_distances(query: np.ndarray, ref: np.ndarray, brute_force: bool = False,
                      chunk: int = 2048) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if not brute_force:
        return cKDTree(ref).query(query)[0]
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        d2 = ((query[s:s + chunk, None, :] - ref[None]) ** 2).sum(-1)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def recon_error(mesh, gt_points, transform: Optional[np.ndarray] = None,
                brute_force: bool = False) -> float:
    """Mean distance in centimetres from each mesh vertex to its nearest GT sample.

    ``transform`` (4x4) is applied to the mesh first.
    """
    verts = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=np.float64)
    if len(verts) == 0:
        raise ValueError("cannot evaluate an empty mesh")
    if len(gt_points) == 0:
        raise ValueError("ground truth has no samples")
    if transform is not None:
        T = np.asarray(transform, dtype=np.float64)
        verts = verts @ T[:3, :3].T + T[:3, 3]
    return float(nearest_distances(verts, gt_points, brute_force).mean() * 100.0)


@dataclass
class EvalReport:
    recon_error_cm: Optional[float] = None
    class_iou: dict = field(default_factory=dict)
    class_acc: dict = field(default_factory=dict)
    class_counts: dict = field(default_factory=dict)
    miou: Optional[float] = None
    macc: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("class_iou", "class_acc", "class_counts"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = []
        if self.recon_error_cm is not None:
            lines.append(f"reconstruction error  {self.recon_error_cm:8.3f} cm")
        if self.class_iou:
            lines.append(f"{'class':>6} {'count':>8} {'IoU':>7} {'Acc':>7}")
            for c in sorted(self.class_iou):
                lines.append(f"{c:>6} {self.class_counts.get(c, 0):>8} "
                             f"{self.class_iou[c]:>7.4f} {self.class_acc[c]:>7.4f}")
        if self.miou is not None:
            lines.append(f"{'mean':>6} {'':>8} {self.miou:>7.4f} {self.macc:>7.4f}")
        return "\n".join(lines)


def semantic_scores(pred, gt, num_classes: Optional[int] = None) -> EvalReport:
    """Per-class IoU and accuracy over GT-annotated vertices (label 0 ignored).

    Means run over classes that occur in the ground truth.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in length ({pred.shape} vs {gt.shape})")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    keep = gt > 0
    p, g = pred[keep], gt[keep]
    if len(p) and (p.max() >= num_classes or g.max() >= num_classes or p.min() < 0):
        raise ValueError("label outside [0, num_classes)")
    conf = np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    report = EvalReport()
    for c in range(1, num_classes):
        if gt_count[c] == 0:
            continue
        report.class_counts[c] = int(gt_count[c])
        report.class_iou[c] = float(tp[c] / (gt_count[c] + pred_count[c] - tp[c]))
        report.class_acc[c] = float(tp[c] / gt_count[c])
    if report.class_iou:
        report.miou = float(np.mean(list(report.class_iou.values())))
        report.macc = float(np.mean(list(report.class_acc.values())))
    report.metadata["excluded_classes"] = [c for c in range(1, num_classes) if gt_count[c] == 0]
    return report


def vertex_labels_from_samples(vertices, samples, sample_classes, max_dist: float) -> np.ndarray:
    """GT label per vertex from its nearest labelled sample; 0 beyond ``max_dist``."""
    if len(vertices) == 0:
        return np.zeros(0, dtype=np.int64)
    dist, idx = cKDTree(np.asarray(samples)).query(np.asarray(vertices))
    labels = np.asarray(sample_classes, dtype=np.int64)[idx]
    labels[dist > max_dist] = 0
    return labels
