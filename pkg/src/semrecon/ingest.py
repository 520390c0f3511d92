"""Loading RGB-D sequences, trajectories and 2D detections.

On-disk layout of a sequence directory::

    associations.txt        "t_rgb rgb/<id>.png t_depth depth/<id>.png" per line
    groundtruth.txt         "t tx ty tz qx qy qz qw" (world-from-camera) per line
    camera.json             {"fx","fy","cx","cy","width","height","depth_scale"}
    rgb/, depth/            8-bit RGB and 16-bit depth PNGs
    detections/<id>.json    [{"class_id", "score", "mask"}]
    masks/<id>_<k>.png      binary masks referenced by the detection files

Frame ids are the file stem of the depth image.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import WORLD_FROM_CAMERA, Intrinsics, Pose

log = logging.getLogger(__name__)

DEFAULT_DEPTH_SCALE = 5000.0


class DataError(Exception):
    """A dataset file is missing or malformed."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class FrameRecord:
    frame_id: str
    timestamp: float
    depth: np.ndarray
    pose: Pose
    rgb: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rgb is not None and self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth rasters differ in size")


@dataclass
class Detection:
    class_id: int
    score: float
    mask: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class DetectionSet:
    frame_id: str
    detections: List[Detection] = field(default_factory=list)

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)


@dataclass
class SequenceConfig:
    depth_scale: Optional[float] = None
    pose_tolerance: float = 0.02
    intrinsics: Optional[Intrinsics] = None
    load_rgb: bool = True
    strict: bool = False


# --- depth ------------------------------------------------------------------

def decode_depth(raw: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    """Raw sensor counts to meters. Zero counts stay zero (invalid)."""
    if not scale > 0:
        raise ValueError(f"depth scale must be positive, got {scale!r}")
    return np.asarray(raw).astype(np.float64) / float(scale)


def encode_depth(depth: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"depth scale must be positive, got {scale!r}")
    counts = np.rint(np.asarray(depth, dtype=np.float64) * scale)
    counts[~np.isfinite(counts) | (counts < 0)] = 0
    return np.clip(counts, 0, 65535).astype(np.uint16)


def read_depth_png(path, scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    raw = _read_png(path)
    if raw.ndim != 2:
        raise DataError("depth image must be single channel", path)
    return decode_depth(raw, scale)


def write_depth_png(path, depth: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    Image.fromarray(encode_depth(depth, scale)).save(path)


def _read_png(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError("missing file", path)
    with Image.open(path) as im:
        return np.array(im)


# --- trajectories -----------------------------------------------------------

def load_trajectory(path) -> List[Tuple[float, Pose]]:
    """Parse a TUM-style trajectory into camera-from-world poses."""
    path = Path(path)
    if not path.exists():
        raise DataError("missing trajectory file", path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataError(f"expected 8 fields, found {len(parts)}", path, lineno)
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            except ValueError as exc:
                raise DataError(f"non-numeric field ({exc})", path, lineno) from None
            q = np.array([qw, qx, qy, qz])
            norm = float(np.linalg.norm(q))
            if norm == 0.0:
                raise DataError("zero quaternion", path, lineno)
            if abs(norm - 1.0) > 1e-3:
                log.warning("%s:%d: quaternion norm %.6f renormalised", path, lineno, norm)
            pose = Pose(tuple(q / norm), (tx, ty, tz), WORLD_FROM_CAMERA)
            out.append((ts, pose.flipped()))
    return out


def write_trajectory(path, entries: Sequence[Tuple[float, Pose]]) -> None:
    """Write poses in world-from-camera form, full float precision."""
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in entries:
            p = pose.as_world_from_camera()
            w, x, y, z = p.rotation
            vals = (ts, *p.translation, x, y, z, w)
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


# --- associations -----------------------------------------------------------

def read_associations(path) -> List[Tuple[float, str, float, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError("missing association index", path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"expected 4 fields, found {len(parts)}", path, lineno)
            try:
                rows.append((float(parts[0]), parts[1], float(parts[2]), parts[3]))
            except ValueError:
                raise DataError("timestamp is not a number", path, lineno) from None
    return rows


def write_associations(path, rows) -> None:
    with open(path, "w") as fh:
        for t_rgb, rgb, t_depth, depth in rows:
            fh.write(f"{t_rgb:.6f} {rgb} {t_depth:.6f} {depth}\n")


def load_camera(root) -> Tuple[Intrinsics, float]:
    path = Path(root) / "camera.json"
    if not path.exists():
        raise DataError("missing camera description", path)
    try:
        d = json.loads(path.read_text())
        return Intrinsics.from_dict(d), float(d.get("depth_scale", DEFAULT_DEPTH_SCALE))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad camera description ({exc})", path) from None


def _nearest(times: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(times, t))
    if i == 0:
        return 0
    if i == len(times):
        return len(times) - 1
    return i if times[i] - t < t - times[i - 1] else i - 1


def load_sequence(root, config: Optional[SequenceConfig] = None) -> Iterator[FrameRecord]:
    """Yield frames in timestamp order, each paired with its nearest pose.

    Frames whose nearest pose is further than ``config.pose_tolerance`` seconds
    are skipped with a warning (or raise when ``config.strict``).
    """
    config = config or SequenceConfig()
    root = Path(root)
    K_file, scale_file = load_camera(root) if (root / "camera.json").exists() else (None, None)
    scale = config.depth_scale or scale_file or DEFAULT_DEPTH_SCALE
    if config.intrinsics is None and K_file is None:
        raise DataError("no intrinsics: camera.json absent and none configured", root)

    rows = sorted(read_associations(root / "associations.txt"), key=lambda r: r[0])
    traj = load_trajectory(root / "groundtruth.txt")
    if not traj:
        raise DataError("trajectory is empty", root / "groundtruth.txt")
    traj.sort(key=lambda e: e[0])
    times = np.array([t for t, _ in traj])

    last_t = -np.inf
    for t_rgb, rgb_rel, _t_depth, depth_rel in rows:
        if t_rgb <= last_t:
            log.warning("duplicate timestamp %.6f skipped", t_rgb)
            continue
        j = _nearest(times, t_rgb)
        gap = abs(times[j] - t_rgb)
        if gap > config.pose_tolerance:
            msg = f"frame at {t_rgb:.6f}: nearest pose {gap * 1000:.1f} ms away"
            if config.strict:
                raise DataError(msg, root / "associations.txt")
            log.warning("%s, skipped", msg)
            continue
        depth = read_depth_png(root / depth_rel, scale)
        rgb = _read_png(root / rgb_rel) if config.load_rgb else None
        last_t = t_rgb
        yield FrameRecord(Path(depth_rel).stem, t_rgb, depth, traj[j][1], rgb)


def sequence_intrinsics(root, config: Optional[SequenceConfig] = None) -> Intrinsics:
    config = config or SequenceConfig()
    if config.intrinsics is not None:
        return config.intrinsics
    return load_camera(root)[0]


def select_keyframes(frames: Sequence[FrameRecord], stride: int = 10) -> List[FrameRecord]:
    """Every ``stride``-th frame, starting with the first."""
    if stride < 1:
        raise ValueError("keyframe stride must be >= 1")
    return list(frames)[::stride]


# --- detections -------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"rle": [int(r) for r in runs], "size": [int(mask.shape[0]), int(mask.shape[1])]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = (int(s) for s in rle["size"])
    runs = np.asarray(rle["rle"], dtype=np.int64)
    if runs.sum() != h * w or (runs < 0).any():
        raise ValueError(f"run lengths sum to {runs.sum()}, expected {h * w}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(h, w)


def load_detections(root, frame_id: str, shape: Optional[Tuple[int, int]] = None) -> DetectionSet:
    """Read ``detections/<frame_id>.json``; a missing file means no detections."""
    root = Path(root)
    path = root / "detections" / f"{frame_id}.json"
    if not path.exists():
        return DetectionSet(frame_id)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    dets = []
    for k, e in enumerate(entries):
        try:
            class_id, score, m = int(e["class_id"]), float(e["score"]), e["mask"]
        except (KeyError, TypeError, ValueError):
            raise DataError(f"entry {k} lacks class_id/score/mask", path) from None
        if not 0.0 <= score <= 1.0:
            raise DataError(f"entry {k}: score {score} outside [0, 1]", path)
        if isinstance(m, str):
            mask = _read_png(root / m) > 0
        else:
            try:
                mask = rle_decode(m)
            except (KeyError, ValueError) as exc:
                raise DataError(f"entry {k}: bad run-length mask ({exc})", path) from None
        if mask.ndim != 2 or (shape is not None and mask.shape != tuple(shape)):
            raise DataError(f"entry {k}: mask shape {mask.shape} does not match frame {shape}", path)
        dets.append(Detection(class_id, score, mask))
    return DetectionSet(frame_id, dets)


def write_detections(root, frame_id: str, detections: DetectionSet, use_rle: bool = True) -> None:
    root = Path(root)
    (root / "detections").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, det in enumerate(detections):
        if use_rle:
            mask = rle_encode(det.mask)
        else:
            (root / "masks").mkdir(exist_ok=True)
            rel = f"masks/{frame_id}_{k}.png"
            Image.fromarray(det.mask.astype(np.uint8) * 255).save(root / rel)
            mask = rel
        entries.append({"class_id": int(det.class_id), "score": float(det.score), "mask": mask})
    (root / "detections" / f"{frame_id}.json").write_text(json.dumps(entries))
