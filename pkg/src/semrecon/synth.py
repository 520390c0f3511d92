"""Synthetic labelled scenes with exact ground truth.

A scene is a handful of analytic primitives (boxes, square plane patches,
spheres), a camera path of look-at waypoints and a noise model. Rendering
ray-casts every pixel, so depth, instance and class rasters are exact
(before optional depth noise).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import Intrinsics, Pose, look_at
from .fusion import Mesh
from .ingest import (DEFAULT_DEPTH_SCALE, Detection, DetectionSet, encode_depth,
                     write_associations, write_detections, write_trajectory)
from .plyio import write_ply


class SceneError(ValueError):
    pass


@dataclass
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    class_id: int
    kind: str = "box"

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise SceneError(f"degenerate box {self.lo} -> {self.hi}")

    def contains(self, p) -> bool:
        return all(l < c < h for l, c, h in zip(self.lo, p, self.hi))

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)

    def residual(self, p) -> np.ndarray:
        """Distance from points to the box surface (zero on it)."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        q = np.maximum(lo - p, p - hi)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0)
        return np.abs(outside + inside)

    def area(self) -> float:
        e = np.subtract(self.hi, self.lo)
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def sample(self, spacing: float) -> np.ndarray:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        pts = []
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            ga = _grid_axis(lo[a], hi[a], spacing)
            gb = _grid_axis(lo[b], hi[b], spacing)
            A, B = np.meshgrid(ga, gb, indexing="ij")
            for side in (lo[axis], hi[axis]):
                p = np.empty((A.size, 3))
                p[:, axis] = side
                p[:, a] = A.ravel()
                p[:, b] = B.ravel()
                pts.append(p)
        return np.concatenate(pts)


@dataclass
class Plane:
    """Square patch centred at ``point`` with unit ``normal`` and half size ``half_extent``."""

    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    half_extent: float
    class_id: int
    kind: str = "plane"

    def __post_init__(self):
        if not self.half_extent > 0 or np.linalg.norm(self.normal) == 0:
            raise SceneError("plane needs a non-zero normal and positive extent")
        n = np.asarray(self.normal, float)
        self.normal = tuple(n / np.linalg.norm(n))

    def basis(self):
        n = np.asarray(self.normal)
        helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
        e1 = np.cross(n, helper)
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(n, e1)

    def contains(self, p) -> bool:
        return False

    def intersect(self, o, d):
        n, p0 = np.asarray(self.normal), np.asarray(self.point)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - o) @ n) / denom
        x = o + t[..., None] * d
        e1, e2 = self.basis()
        inside = (np.abs((x - p0) @ e1) <= self.half_extent) & (np.abs((x - p0) @ e2) <= self.half_extent)
        hit = np.isfinite(t) & (t > 0) & inside
        return np.where(hit, t, np.inf)

    def residual(self, p) -> np.ndarray:
        return np.abs((p - np.asarray(self.point)) @ np.asarray(self.normal))

    def area(self) -> float:
        return (2 * self.half_extent) ** 2

    def sample(self, spacing: float) -> np.ndarray:
        e1, e2 = self.basis()
        g = _grid_axis(-self.half_extent, self.half_extent, spacing)
        A, B = np.meshgrid(g, g, indexing="ij")
        return np.asarray(self.point) + A.reshape(-1, 1) * e1 + B.reshape(-1, 1) * e2


@dataclass
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    class_id: int
    kind: str = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError("sphere radius must be positive")

    def contains(self, p) -> bool:
        return float(np.linalg.norm(np.subtract(p, self.center))) < self.radius

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        a = (d * d).sum(-1)
        b = 2 * (d @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0))
        t = (-b - root) / (2 * a)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def residual(self, p) -> np.ndarray:
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius)

    def area(self) -> float:
        return 4 * np.pi * self.radius ** 2

    def sample(self, spacing: float) -> np.ndarray:
        n = max(16, int(np.ceil(self.area() / spacing ** 2)))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
        return np.asarray(self.center) + self.radius * dirs


_KINDS = {"box": Box, "plane": Plane, "sphere": Sphere}


def _grid_axis(lo, hi, spacing):
    n = max(2, int(np.ceil((hi - lo) / spacing)) + 1)
    return np.linspace(lo, hi, n)


@dataclass
class NoiseModel:
    depth_sigma: float = 0.0
    flip_prob: float = 0.0
    score_range: Tuple[float, float] = (0.92, 0.99)
    flip_score_range: Tuple[float, float] = (0.92, 0.99)
    confusable: Dict[int, int] = field(default_factory=dict)
    min_area: int = 50

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise SceneError("flip probability must lie in [0, 1]")
        self.confusable = {int(k): int(v) for k, v in self.confusable.items()}

    def confuse(self, class_id: int) -> int:
        return self.confusable.get(class_id, class_id % 40 + 1)


@dataclass
class SceneSpec:
    primitives: List = field(default_factory=list)
    waypoints: List[Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = field(default_factory=list)
    frame_count: int = 1
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480))
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    fps: float = 30.0
    depth_scale: float = DEFAULT_DEPTH_SCALE
    sample_spacing: float = 0.01
    up: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.frame_count < 1:
            raise SceneError("frame count must be >= 1")
        if not self.waypoints:
            raise SceneError("camera path needs at least one waypoint")

    def to_dict(self) -> dict:
        return {
            "primitives": [asdict(p) for p in self.primitives],
            "waypoints": [[list(e), list(t)] for e, t in self.waypoints],
            "frame_count": self.frame_count,
            "intrinsics": self.intrinsics.to_dict(),
            "noise": {**asdict(self.noise), "confusable": {str(k): v for k, v in self.noise.confusable.items()}},
            "seed": self.seed,
            "fps": self.fps,
            "depth_scale": self.depth_scale,
            "sample_spacing": self.sample_spacing,
            "up": list(self.up),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = []
        for p in d.get("primitives", []):
            p = dict(p)
            kind = p.pop("kind")
            if kind not in _KINDS:
                raise SceneError(f"unknown primitive kind {kind!r}")
            prims.append(_KINDS[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
        noise = dict(d.get("noise", {}))
        for key in ("score_range", "flip_score_range"):
            if key in noise:
                noise[key] = tuple(noise[key])
        return cls(
            primitives=prims,
            waypoints=[(tuple(e), tuple(t)) for e, t in d["waypoints"]],
            frame_count=int(d.get("frame_count", 1)),
            intrinsics=Intrinsics.from_dict(d["intrinsics"]) if "intrinsics" in d else Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480),
            noise=NoiseModel(**noise),
            seed=int(d.get("seed", 0)),
            fps=float(d.get("fps", 30.0)),
            depth_scale=float(d.get("depth_scale", DEFAULT_DEPTH_SCALE)),
            sample_spacing=float(d.get("sample_spacing", 0.01)),
            up=tuple(d.get("up", (0.0, 0.0, 1.0))),
        )

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def poses(self) -> List[Pose]:
        """Camera-from-world pose per frame, linear between waypoints."""
        eyes = np.array([w[0] for w in self.waypoints], float)
        targets = np.array([w[1] for w in self.waypoints], float)
        if len(eyes) == 1 or self.frame_count == 1:
            s = np.zeros(self.frame_count)
        else:
            s = np.linspace(0, len(eyes) - 1, self.frame_count)
        out = []
        for x in s:
            i = min(int(np.floor(x)), len(eyes) - 2) if len(eyes) > 1 else 0
            f = x - i
            j = min(i + 1, len(eyes) - 1)
            eye = (1 - f) * eyes[i] + f * eyes[j]
            tgt = (1 - f) * targets[i] + f * targets[j]
            out.append(look_at(eye, tgt, up=self.up))
        return out


@dataclass
class RenderedFrame:
    frame_id: str
    timestamp: float
    depth: np.ndarray
    instance: np.ndarray  # 0 = nothing hit, else primitive index + 1
    classes: np.ndarray
    pose: Pose


@dataclass
class Rendering:
    frames: List[RenderedFrame]
    gt_points: np.ndarray
    gt_classes: np.ndarray
    intrinsics: Intrinsics


def raycast(spec: SceneSpec, pose: Pose):
    """Exact depth and hit-primitive index (-1 for none) per pixel."""
    K = spec.intrinsics
    uu, vv = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    dc = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    wc = pose.flipped()
    R = wc.rotation_matrix
    eye = np.asarray(wc.translation)
    for prim in spec.primitives:
        if prim.contains(eye):
            raise SceneError(f"camera at {eye.round(3).tolist()} is inside a {prim.kind}")
    dw = dc @ R.T
    best = np.full(uu.shape, np.inf)
    hit = np.full(uu.shape, -1, dtype=np.int64)
    for i, prim in enumerate(spec.primitives):
        t = prim.intersect(eye, dw)
        closer = t < best
        best[closer] = t[closer]
        hit[closer] = i
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth, hit


def render(spec: SceneSpec) -> Rendering:
    frames = []
    for k, pose in enumerate(spec.poses()):
        depth, hit = raycast(spec, pose)
        if spec.noise.depth_sigma > 0:
            rng = np.random.default_rng([spec.seed, 1, k])
            valid = depth > 0
            depth = depth + np.where(valid, rng.normal(0.0, spec.noise.depth_sigma, depth.shape), 0.0)
            depth[valid & (depth <= 0)] = 0.0
        lut = np.array([0] + [p.class_id for p in spec.primitives], dtype=np.int32)
        instance = (hit + 1).astype(np.int32)
        frames.append(RenderedFrame(f"{k:06d}", round(k / spec.fps, 6), depth, instance,
                                    lut[instance], pose))
    pts, cls = gt_samples(spec)
    return Rendering(frames, pts, cls, spec.intrinsics)


def gt_samples(spec: SceneSpec):
    pts, cls = [], []
    for prim in spec.primitives:
        p = prim.sample(spec.sample_spacing)
        pts.append(p)
        cls.append(np.full(len(p), prim.class_id, dtype=np.int64))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(cls)


def corrupt_detections(frames: Sequence[RenderedFrame], noise: NoiseModel, seed: int) -> List[DetectionSet]:
    """Detections from GT instances with random label flips.

    Per frame and visible instance (area >= ``min_area``): with probability
    ``flip_prob`` the class becomes its confusable class and the score is
    drawn from ``flip_score_range``; otherwise the GT class with a score from
    ``score_range``.
    """
    out = []
    for k, fr in enumerate(frames):
        rng = np.random.default_rng([seed, 2, k])
        ids, counts = np.unique(fr.instance[fr.instance > 0], return_counts=True)
        dets = []
        for inst_id, area in zip(ids.tolist(), counts.tolist()):
            if area < noise.min_area:
                continue
            mask = fr.instance == inst_id
            gt_class = int(fr.classes[mask][0])
            flip = rng.random() < noise.flip_prob
            lo, hi = noise.flip_score_range if flip else noise.score_range
            score = float(rng.uniform(lo, hi))
            dets.append(Detection(noise.confuse(gt_class) if flip else gt_class, score, mask))
        out.append(DetectionSet(fr.frame_id, dets))
    return out


def _palette(n: int = 64) -> np.ndarray:
    rng = np.random.default_rng(12345)
    pal = rng.integers(30, 256, size=(n, 3), dtype=np.uint8)
    pal[0] = 0
    return pal


def write_dataset(spec: SceneSpec, root, rendering: Optional[Rendering] = None,
                  detections: Optional[List[DetectionSet]] = None, use_rle: bool = True) -> Rendering:
    """Render (unless given) and write a sequence directory readable by ``ingest``."""
    root = Path(root)
    rendering = rendering or render(spec)
    if detections is None:
        detections = corrupt_detections(rendering.frames, spec.noise, spec.seed)
    for sub in ("rgb", "depth", "gt/instance", "gt/class", "detections"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    pal = _palette()
    rows = []
    for fr, dets in zip(rendering.frames, detections):
        rgb = pal[fr.classes % len(pal)]
        Image.fromarray(rgb).save(root / "rgb" / f"{fr.frame_id}.png")
        Image.fromarray(encode_depth(fr.depth, spec.depth_scale)).save(root / "depth" / f"{fr.frame_id}.png")
        Image.fromarray(fr.instance.astype(np.uint16)).save(root / "gt/instance" / f"{fr.frame_id}.png")
        Image.fromarray(fr.classes.astype(np.uint16)).save(root / "gt/class" / f"{fr.frame_id}.png")
        write_detections(root, fr.frame_id, dets, use_rle=use_rle)
        rows.append((fr.timestamp, f"rgb/{fr.frame_id}.png", fr.timestamp, f"depth/{fr.frame_id}.png"))
    write_associations(root / "associations.txt", rows)
    write_trajectory(root / "groundtruth.txt", [(fr.timestamp, fr.pose) for fr in rendering.frames])
    cam = {**spec.intrinsics.to_dict(), "depth_scale": spec.depth_scale}
    (root / "camera.json").write_text(json.dumps(cam, indent=2))
    spec.save(root / "scene.json")
    write_ply(root / "gt" / "mesh_samples.ply",
              Mesh(rendering.gt_points, np.zeros((0, 3), np.int64), rendering.gt_classes))
    return rendering


# --- ready-made scenes ----------------------------------------------------------

def plane_scene(distance: float = 1.0, frame_count: int = 1, depth_sigma: float = 0.0,
                seed: int = 0) -> SceneSpec:
    """A large fronto-parallel wall ``distance`` meters in front of a static camera."""
    return SceneSpec(
        primitives=[Plane((0.0, distance, 1.0), (0.0, -1.0, 0.0), 5.0, 1)],
        waypoints=[((0.0, 0.0, 1.0), (0.0, distance, 1.0))],
        frame_count=frame_count,
        noise=NoiseModel(depth_sigma=depth_sigma),
        seed=seed,
    )


def three_object_scene(frame_count: int = 8, flip_prob: float = 0.0, seed: int = 0,
                       depth_sigma: float = 0.0) -> SceneSpec:
    """Floor, a cabinet-like box and a ball, viewed along an arc.

    Classes follow NYU40 ids: floor 2, cabinet 3, ball (other prop) 40.
    Confusions: cabinet <-> chair (5), ball -> other furniture (39),
    floor -> wall (1).
    """
    prims = [
        Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 1.5, 2),
        Box((-0.55, -0.25, 0.0), (-0.05, 0.25, 0.6), 3),
        Sphere((0.45, 0.05, 0.25), 0.25, 40),
    ]
    waypoints = []
    for ang in np.linspace(-50, 50, 5):
        a = np.deg2rad(ang)
        eye = (2.2 * np.sin(a), -2.2 * np.cos(a), 1.4)
        waypoints.append((eye, (0.0, 0.0, 0.25)))
    return SceneSpec(
        primitives=prims,
        waypoints=waypoints,
        frame_count=frame_count,
        noise=NoiseModel(depth_sigma=depth_sigma, flip_prob=flip_prob,
                         confusable={3: 5, 40: 39, 2: 1}),
        seed=seed,
    )
