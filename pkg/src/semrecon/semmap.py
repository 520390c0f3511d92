"""Sparse semantic object map and label propagation across keyframes.

Each map object keeps a class, a confidence weight and a small cloud of
support points. On every keyframe the objects are reprojected, matched to
the frame's filtered instances by mask IoU, and used to confirm, correct or
drop the detector labels.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import Intrinsics, Pose, project_points, pixel_index
from .segment2d import FilteredSeg

FROM_DETECTOR = "from-detector"
CORRECTED = "corrected-by-map"
NEW_OBJECT = "new-object"

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MapParams:
    t_iou: float = 0.4
    t_p1: float = 0.9
    t_p2: float = 0.7
    delta_up: float = 0.05
    delta_down: float = 0.05
    max_support: int = 512
    # support points further than this behind the observed depth are hidden
    occlusion_tol: float = 0.1

    def __post_init__(self):
        for name in ("t_iou", "t_p1", "t_p2", "delta_up", "delta_down"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"semmap.{name} must lie in [0, 1], got {v}")
        if self.max_support < 1:
            raise ValueError("semmap.max_support must be >= 1")


@dataclass
class SemanticObject:
    object_id: int
    class_id: int
    weight: float
    support: np.ndarray  # (M, 3) world points
    footprint: np.ndarray  # (M,) side length in meters each point stands for
    last_seen: int = 0

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"object weight {self.weight} outside [0, 1]")
        if len(self.support) == 0:
            raise ValueError("object needs at least one support point")


@dataclass
class SparseSemanticMap:
    params: MapParams = field(default_factory=MapParams)
    objects: Dict[int, SemanticObject] = field(default_factory=dict)
    next_id: int = 1
    keyframes_seen: int = 0

    def __len__(self):
        return len(self.objects)

    def add(self, class_id: int, weight: float, support, footprint, seen: int) -> SemanticObject:
        obj = SemanticObject(self.next_id, int(class_id), float(weight),
                             np.asarray(support, dtype=np.float64),
                             np.asarray(footprint, dtype=np.float64), seen)
        self.objects[obj.object_id] = obj
        self.next_id += 1
        return obj

    # -- checkpoints -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "params": asdict(self.params),
            "next_id": self.next_id,
            "keyframes_seen": self.keyframes_seen,
            "objects": [
                {
                    "id": o.object_id,
                    "class_id": o.class_id,
                    "weight": o.weight,
                    "last_seen": o.last_seen,
                    "support": o.support.tolist(),
                    "footprint": o.footprint.tolist(),
                }
                for o in sorted(self.objects.values(), key=lambda o: o.object_id)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseSemanticMap":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        m = cls(MapParams(**d["params"]), {}, int(d["next_id"]), int(d["keyframes_seen"]))
        for o in d["objects"]:
            m.objects[int(o["id"])] = SemanticObject(
                int(o["id"]), int(o["class_id"]), float(o["weight"]),
                np.array(o["support"], dtype=np.float64).reshape(-1, 3),
                np.array(o["footprint"], dtype=np.float64),
                int(o["last_seen"]),
            )
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SparseSemanticMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ConsistentMasks:
    seg: FilteredSeg
    provenance: List[str]
    object_ids: List[Optional[int]]

    def counts(self) -> Dict[str, int]:
        out = {FROM_DETECTOR: 0, CORRECTED: 0, NEW_OBJECT: 0}
        for p in self.provenance:
            out[p] += 1
        return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _splat_radius(footprint, z, fx) -> np.ndarray:
    half = np.asarray(footprint) * fx / (2.0 * z)
    return np.maximum(1, np.ceil(half - 0.5)).astype(np.int64)


def reproject_object(obj: SemanticObject, pose: Pose, K: Intrinsics,
                     depth: Optional[np.ndarray] = None, occlusion_tol: float = 0.1) -> np.ndarray:
    """Binary region covered by the object's visible support points.

    Every visible point paints a square of at least 3x3 pixels, widened to the
    image size of the surface patch the point stands for.
    """
    region = np.zeros((K.height, K.width), dtype=bool)
    u, v, z, ok = project_points(K, pose, obj.support)
    if not ok.any():
        return region
    iu, iv = pixel_index(u[ok]), pixel_index(v[ok])
    zz, fp = z[ok], obj.footprint[ok]
    if depth is not None:
        d = depth[iv, iu]
        visible = (d <= 0) | (zz <= d + occlusion_tol)
        iu, iv, zz, fp = iu[visible], iv[visible], zz[visible], fp[visible]
    r = _splat_radius(fp, zz, K.fx)
    for x, y, rr in zip(iu.tolist(), iv.tolist(), r.tolist()):
        region[max(0, y - rr): y + rr + 1, max(0, x - rr): x + rr + 1] = True
    return region


def _grid_sample(mask: np.ndarray, depth: np.ndarray, cap: int):
    """Pixels of ``mask`` on the coarsest-needed regular grid, at most ``cap``."""
    ok = mask & (depth > 0)
    total = int(np.count_nonzero(ok))
    if total == 0:
        return None
    step = max(1, int(np.ceil(np.sqrt(total / cap))))
    while True:
        off = step // 2
        grid = np.zeros_like(ok)
        grid[off::step, off::step] = True
        rows, cols = np.nonzero(ok & grid)
        if len(rows) == 0:
            # object thinner than the grid: fall back to evenly spaced pixels
            rows, cols = np.nonzero(ok)
            idx = np.linspace(0, len(rows) - 1, min(cap, len(rows))).round().astype(int)
            return rows[idx], cols[idx], max(1, step)
        if len(rows) <= cap:
            return rows, cols, step
        step += 1


def _support_from_pixels(mask, depth, pose: Pose, K: Intrinsics, cap: int):
    sample = _grid_sample(mask, depth, cap)
    if sample is None:
        return None
    rows, cols, step = sample
    z = depth[rows, cols].astype(np.float64)
    pc = np.stack([(cols - K.cx) * z / K.fx, (rows - K.cy) * z / K.fy, z], axis=1)
    world = pose.flipped().apply(pc)
    return world, step * z / K.fx


def _cap_support(points: np.ndarray, footprint: np.ndarray, cap: int):
    if len(points) <= cap:
        return points, footprint
    cell = float(np.median(footprint))
    while True:
        keys = np.floor(points / cell).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        if len(first) <= cap:
            first = np.sort(first)
            return points[first], np.maximum(footprint[first], cell)
        cell *= 1.5


def _merge_support(obj: SemanticObject, region: np.ndarray, inst_mask: np.ndarray,
                   depth, pose, K, cap: int) -> None:
    new = _support_from_pixels(inst_mask & ~region, depth, pose, K, cap)
    if new is None:
        return
    pts = np.concatenate([obj.support, new[0]])
    fp = np.concatenate([obj.footprint, new[1]])
    obj.support, obj.footprint = _cap_support(pts, fp, cap)


def propagate(smap: SparseSemanticMap, seg: FilteredSeg, depth: np.ndarray,
              pose: Pose, K: Intrinsics) -> Tuple[SparseSemanticMap, ConsistentMasks]:
    """Match map objects to the frame's instances and correct their labels.

    Returns a new map; ``smap`` is left untouched.
    """
    p = smap.params
    new_map = copy.deepcopy(smap)
    new_map.keyframes_seen += 1
    frame_no = new_map.keyframes_seen
    out = seg.copy()
    m = len(out.instances)
    provenance = [FROM_DETECTOR] * m
    object_ids: List[Optional[int]] = [None] * m

    inst_area = np.bincount(seg.labels.ravel(), minlength=m + 1)
    regions = {}
    pairs = []
    for oid in sorted(new_map.objects):
        obj = new_map.objects[oid]
        region = reproject_object(obj, pose, K, depth, p.occlusion_tol)
        regions[oid] = region
        area = int(np.count_nonzero(region))
        if area == 0 or m == 0:
            continue
        inter = np.bincount(seg.labels[region], minlength=m + 1)
        for k in range(1, m + 1):
            if inter[k] == 0:
                continue
            iou = inter[k] / (area + inst_area[k] - inter[k])
            if iou > p.t_iou:
                pairs.append((-iou, oid, k))
    pairs.sort()

    used_obj, used_inst, removed = set(), set(), set()
    for _neg_iou, oid, k in pairs:
        if oid in used_obj or k in used_inst:
            continue
        used_obj.add(oid)
        used_inst.add(k)
        obj = new_map.objects[oid]
        inst = out.instances[k - 1]
        obj.last_seen = frame_no
        object_ids[k - 1] = oid
        confident = inst.probability >= p.t_p1
        if inst.class_id == obj.class_id:
            if confident:
                obj.weight = min(1.0, obj.weight + p.delta_up)
                _merge_support(obj, regions[oid], seg.labels == k, depth, pose, K, p.max_support)
            else:
                inst.probability = obj.weight
        elif confident:
            obj.weight = max(0.0, obj.weight - p.delta_down)
            if obj.weight >= p.t_p2:
                inst.class_id = obj.class_id
                inst.probability = obj.weight
                provenance[k - 1] = CORRECTED
            else:
                removed.add(oid)
                object_ids[k - 1] = None
                used_inst.discard(k)
        else:
            # low-confidence disagreement: the map label wins, weight untouched
            inst.class_id = obj.class_id
            inst.probability = obj.weight
            provenance[k - 1] = CORRECTED

    for oid in sorted(removed):
        del new_map.objects[oid]

    for k in range(1, m + 1):
        if k in used_inst:
            continue
        inst = out.instances[k - 1]
        if inst.probability > p.t_p1:
            sup = _support_from_pixels(seg.labels == k, depth, pose, K, p.max_support)
            if sup is None:
                continue
            obj = new_map.add(inst.class_id, inst.probability, sup[0], sup[1], frame_no)
            provenance[k - 1] = NEW_OBJECT
            object_ids[k - 1] = obj.object_id

    for oid in [o for o, obj in new_map.objects.items() if obj.weight < p.t_p2]:
        del new_map.objects[oid]
    return new_map, ConsistentMasks(out, provenance, object_ids)
