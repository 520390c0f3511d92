"""Per-frame geometric segmentation and its intersection with detector masks."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import Intrinsics, unproject_depth
from .ingest import DetectionSet

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), camera frame
    valid: np.ndarray  # (H, W) bool


@dataclass
class GeomSegmentation:
    covered: np.ndarray  # (H, W) bool, pixel lies in some geometric instance
    instances: np.ndarray  # (H, W) int32, 0 = background

    @property
    def count(self) -> int:
        return int(self.instances.max(initial=0))


@dataclass
class SegInstance:
    class_id: int
    probability: float
    pixel_count: int
    source_index: int = -1


@dataclass
class FilteredSeg:
    """Instance raster (0 = unlabeled, k = ``instances[k - 1]``) and its records."""

    labels: np.ndarray
    instances: List[SegInstance] = field(default_factory=list)

    def mask(self, k: int) -> np.ndarray:
        return self.labels == k

    def class_raster(self) -> np.ndarray:
        lut = np.zeros(len(self.instances) + 1, dtype=np.int32)
        lut[1:] = [inst.class_id for inst in self.instances]
        return lut[self.labels]

    def probability_raster(self) -> np.ndarray:
        lut = np.zeros(len(self.instances) + 1, dtype=np.float64)
        lut[1:] = [inst.probability for inst in self.instances]
        return lut[self.labels]

    def copy(self) -> "FilteredSeg":
        return FilteredSeg(self.labels.copy(), [replace(i) for i in self.instances])


@dataclass(frozen=True)
class SegmentParams:
    edge_angle_deg: float = 20.0
    depth_gap_rel: float = 0.04
    min_area: int = 200


def compute_normals(depth: np.ndarray, K: Intrinsics) -> NormalMap:
    """Normals from central differences of back-projected neighbours.

    Valid only where the pixel and its four neighbours have depth; oriented
    toward the camera.
    """
    h, w = depth.shape
    P = unproject_depth(K, depth)
    has = depth > 0
    valid = np.zeros((h, w), dtype=bool)
    valid[1:-1, 1:-1] = (
        has[1:-1, 1:-1] & has[1:-1, 2:] & has[1:-1, :-2] & has[2:, 1:-1] & has[:-2, 1:-1]
    )
    normals = np.zeros((h, w, 3))
    du = P[1:-1, 2:] - P[1:-1, :-2]
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    inner = valid[1:-1, 1:-1] & (norm > 0)
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    facing = np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1])
    n[facing > 0] *= -1
    n[~inner] = 0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = inner
    return NormalMap(normals, valid)


def edge_map(normals: NormalMap, depth: np.ndarray, params: SegmentParams = SegmentParams()) -> np.ndarray:
    """Pixels on a normal crease or a depth discontinuity with any 4-neighbour."""
    cos_t = np.cos(np.deg2rad(params.edge_angle_deg))
    n, ok = normals.normals, normals.valid
    has = depth > 0
    edge = np.zeros(depth.shape, dtype=bool)
    # horizontal then vertical neighbour pairs; both pixels of a pair get marked
    for a, b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                 ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        both = ok[a] & ok[b]
        crease = both & (np.einsum("ijk,ijk->ij", n[a], n[b]) < cos_t)
        da, db = depth[a], depth[b]
        gap_a = has[a] & has[b] & (np.abs(da - db) > params.depth_gap_rel * da)
        gap_b = has[a] & has[b] & (np.abs(da - db) > params.depth_gap_rel * db)
        edge[a] |= crease | gap_a
        edge[b] |= crease | gap_b
    return edge


def geometric_segment(normals: NormalMap, depth: np.ndarray,
                      params: SegmentParams = SegmentParams()) -> GeomSegmentation:
    if normals.valid.shape != depth.shape:
        raise ValueError("normal map and depth raster differ in size")
    interior = normals.valid & ~edge_map(normals, depth, params)
    comp, n = ndimage.label(interior, structure=_FOUR_CONNECTED)
    if n == 0:
        return GeomSegmentation(np.zeros(depth.shape, bool), np.zeros(depth.shape, np.int32))
    areas = np.bincount(comp.ravel(), minlength=n + 1)
    keep = areas >= params.min_area
    keep[0] = False
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    instances = lut[comp]
    return GeomSegmentation(instances > 0, instances)


def filter_semantic(detections: DetectionSet, geom: GeomSegmentation) -> FilteredSeg:
    """Keep detector labels only on geometrically covered pixels.

    Overlaps go to the higher score, then the lower class id, then the
    earlier detection. Detections with nothing left are dropped.
    """
    shape = geom.covered.shape
    owner = np.zeros(shape, dtype=np.int32)  # 1-based detection index
    order = sorted(range(len(detections.detections)),
                   key=lambda i: (-detections.detections[i].score,
                                  detections.detections[i].class_id, i))
    for i in order:
        m = np.asarray(detections.detections[i].mask, dtype=bool)
        if m.shape != shape:
            raise ValueError(f"detection mask {m.shape} does not match frame {shape}")
        owner[m & (owner == 0)] = i + 1
    owner[~geom.covered] = 0

    counts = np.bincount(owner.ravel(), minlength=len(detections.detections) + 1)
    lut = np.zeros(len(detections.detections) + 1, dtype=np.int32)
    instances = []
    for i, det in enumerate(detections.detections):
        if counts[i + 1] > 0:
            instances.append(SegInstance(int(det.class_id), float(det.score), int(counts[i + 1]), i))
            lut[i + 1] = len(instances)
    return FilteredSeg(lut[owner], instances)


def segment_frame(depth, K, detections: DetectionSet, params: SegmentParams = SegmentParams()):
    """Normals, geometric instances and the filtered segmentation in one go."""
    normals = compute_normals(depth, K)
    geom = geometric_segment(normals, depth, params)
    return normals, geom, filter_semantic(detections, geom)


def _id_colors(ids: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(7)
    palette = rng.integers(40, 256, size=(int(ids.max(initial=0)) + 1, 3), dtype=np.uint8)
    palette[0] = 0
    return palette[ids]


def dump_debug(out_dir, frame_id: str, normals: NormalMap, geom: GeomSegmentation) -> None:
    """Write the normal map and instance map as PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = ((normals.normals * -0.5 + 0.5) * 255).astype(np.uint8)
    rgb[~normals.valid] = 0
    Image.fromarray(rgb).save(out_dir / f"{frame_id}_normals.png")
    Image.fromarray(_id_colors(geom.instances)).save(out_dir / f"{frame_id}_instances.png")
