"""In-memory pipeline stages shared by the command-line driver and the tests.

Frames are any objects with ``frame_id``, ``depth`` and a camera-from-world
``pose``; :class:`~semrecon.ingest.FrameRecord` and
:class:`~semrecon.synth.RenderedFrame` both qualify.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .core import Intrinsics
from .fusion import Mesh, TsdfVolume, VoxelLabels, transfer_labels
from .ingest import DetectionSet
from .project import (ClassProbabilityProvider, FileFeatureProvider, intersection_mask,
                      label_vote_fusion, project_features)
from .segment2d import FilteredSeg, segment_frame
from .semmap import ConsistentMasks, SparseSemanticMap, propagate


def _map(fn, items, threads: int) -> list:
    # ordered results, so the thread count never changes the output
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def reconstruct(frames: Sequence, K: Intrinsics, cfg: PipelineConfig):
    """Integrate every frame and extract the mesh."""
    vol = TsdfVolume(cfg.fusion.voxel_size, cfg.fusion.truncation, cfg.fusion.w_max)
    for fr in frames:
        vol.integrate(fr.depth, fr.pose, K)
    return vol, vol.extract_mesh()


def segment_keyframes(frames: Sequence, detections: Sequence[DetectionSet], K: Intrinsics,
                      cfg: PipelineConfig) -> List[FilteredSeg]:
    params = cfg.segment_params()
    return _map(lambda fd: segment_frame(fd[0].depth, K, fd[1], params)[2],
                list(zip(frames, detections)), cfg.run.threads)


@dataclass
class PropagationRun:
    smap: SparseSemanticMap
    masks: List[ConsistentMasks] = field(default_factory=list)


def propagate_sequence(frames: Sequence, segs: Sequence[FilteredSeg], K: Intrinsics,
                       cfg: PipelineConfig, smap: Optional[SparseSemanticMap] = None,
                       on_frame: Optional[Callable] = None) -> PropagationRun:
    """Run the semantic map over keyframes in order.

    ``on_frame(index, frame, masks, smap)`` is called after each keyframe.
    """
    smap = smap if smap is not None else SparseSemanticMap(cfg.map_params())
    run = PropagationRun(smap)
    for i, (fr, seg) in enumerate(zip(frames, segs)):
        run.smap, cm = propagate(run.smap, seg, fr.depth, fr.pose, K)
        run.masks.append(cm)
        if on_frame is not None:
            on_frame(i, fr, cm, run.smap)
    return run


def feature_provider(cfg: PipelineConfig):
    se = cfg.semantic
    if se.feature_provider == "file":
        return FileFeatureProvider(se.feature_dir, se.feature_level)
    return ClassProbabilityProvider(num_classes=se.num_classes, level=se.feature_level)


def label_mesh(vol: TsdfVolume, mesh: Mesh, frames: Sequence, segs: Sequence[FilteredSeg],
               K: Intrinsics, cfg: PipelineConfig) -> Mesh:
    """Vote per-view labels into the voxels under the mesh and transfer them to vertices."""
    if len(mesh.vertices) == 0:
        return Mesh(mesh.vertices, mesh.faces, np.zeros(0, np.int64), mesh.colors)
    coords = np.unique(vol.voxel_of(mesh.vertices), axis=0)
    points = vol.voxel_center(coords)
    provider = feature_provider(cfg)

    def one(item):
        fr, seg = item
        feat = provider.features(fr.frame_id, seg.class_raster(), seg.probability_raster())
        mask = intersection_mask(points, fr.pose, K, fr.depth, seg.labels, cfg.eps_occ)
        return project_features(feat, mask, points, fr.pose, K), mask

    views = _map(one, list(zip(frames, segs)), cfg.run.threads)
    if not views:
        return Mesh(mesh.vertices, mesh.faces, np.zeros(len(mesh.vertices), np.int64), mesh.colors)
    dist = label_vote_fusion([v[0] for v in views], [v[1] for v in views])
    labels = VoxelLabels(coords, dist, vol.voxel_size, vol.origin)
    return transfer_labels(mesh, labels, cfg.semantic.fallback_radius)


def semantic_pipeline(frames: Sequence, detections: Sequence[DetectionSet], K: Intrinsics,
                      cfg: PipelineConfig, keyframe_stride: Optional[int] = None):
    """Full chain: fusion over all frames, labels from keyframes.

    Returns ``(labeled_mesh, volume, propagation_run_or_None)``.
    """
    stride = cfg.dataset.keyframe_stride if keyframe_stride is None else keyframe_stride
    vol, mesh = reconstruct(frames, K, cfg)
    key_frames = list(frames)[::stride]
    key_dets = list(detections)[::stride]
    segs = segment_keyframes(key_frames, key_dets, K, cfg)
    run = None
    if cfg.semantic.propagation:
        run = propagate_sequence(key_frames, segs, K, cfg)
        segs = [cm.seg for cm in run.masks]
    return label_mesh(vol, mesh, key_frames, segs, K, cfg), vol, run
