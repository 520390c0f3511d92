"""Multi-view feature projection onto voxels and its aggregation.

Per view, voxel points are tested for visibility against that view's depth
and filtered segmentation. Visible voxels pick up the feature vector of
the pixel they land on. The per-view slabs are stacked, aggregated by
sparse 3D convolutions followed by a max over views, and concatenated with
point-cloud features.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .core import Intrinsics, Pose, pixel_index, project_points

PYRAMID_CHANNELS = {1: 512, 2: 256, 3: 128, 4: 96}
DOT_CHANNELS = {1: 256, 2: 128, 3: 128, 4: 96}
MAX_FEATURE_RASTER = (240, 320)  # (height, width)


@dataclass
class IntersectionMask:
    mask: np.ndarray  # (N,) bool
    pixel: np.ndarray  # (N,) flat full-resolution pixel index, -1 where mask is False
    width: int
    height: int

    def __len__(self):
        return len(self.mask)


def intersection_mask(points, pose: Pose, K: Intrinsics, depth: np.ndarray,
                      labels: np.ndarray, eps_occ: float) -> IntersectionMask:
    """Voxels that project in-image, agree with the observed depth within
    ``eps_occ``, and land on a labelled pixel of ``labels`` (non-zero)."""
    if depth.shape != labels.shape or depth.shape != (K.height, K.width):
        raise ValueError("depth, labels and intrinsics must share one raster size")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u, v, z, ok = project_points(K, pose, pts)
    iu = np.where(ok, pixel_index(u), 0)
    iv = np.where(ok, pixel_index(v), 0)
    d = depth[iv, iu]
    ok &= (d > 0) & (np.abs(z - d) <= eps_occ) & (labels[iv, iu] > 0)
    pixel = np.where(ok, iv * K.width + iu, -1)
    return IntersectionMask(ok, pixel, K.width, K.height)


@dataclass
class FeatureImage:
    data: np.ndarray  # (H, W, C) float32
    level: int = 1

    def __post_init__(self):
        if self.level not in PYRAMID_CHANNELS:
            raise ValueError(f"feature level must be one of 1..4, got {self.level}")
        if self.data.ndim != 3:
            raise ValueError("feature image must be (H, W, C)")
        h, w = self.data.shape[:2]
        if h > MAX_FEATURE_RASTER[0] or w > MAX_FEATURE_RASTER[1]:
            raise ValueError(f"feature raster {h}x{w} exceeds {MAX_FEATURE_RASTER[0]}x{MAX_FEATURE_RASTER[1]}")

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def check_channels(self, expected: Optional[int] = None) -> None:
        expected = PYRAMID_CHANNELS[self.level] if expected is None else expected
        if self.channels != expected:
            raise ValueError(f"level {self.level} expects {expected} channels, got {self.channels}")


@dataclass
class Slab:
    """Sparse N x C voxel features: rows present, their values."""

    n: int
    rows: np.ndarray  # (M,) sorted voxel indices
    values: np.ndarray  # (M, C)
    level: int = 1

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.channels), dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


def project_features(feat: FeatureImage, mask: IntersectionMask, points, pose: Pose,
                     K: Intrinsics) -> Slab:
    """Copy each visible voxel's nearest-pixel feature at the feature raster scale."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) != len(mask):
        raise ValueError("mask and point count differ")
    if (mask.width, mask.height) != (K.width, K.height):
        raise ValueError("mask was built for another raster size")
    hl, wl = feat.data.shape[:2]
    if hl > K.height or wl > K.width or hl * K.width != wl * K.height:
        raise ValueError(f"feature raster {hl}x{wl} is not a downscale of {K.height}x{K.width}")
    rows = np.flatnonzero(mask.mask)
    if len(rows) == 0:
        return Slab(len(pts), rows, np.zeros((0, feat.channels), np.float32), feat.level)
    u, v, _, _ = project_points(K, pose, pts[rows])
    cl = np.clip(np.floor((u + 0.5) * wl / K.width).astype(np.int64), 0, wl - 1)
    rl = np.clip(np.floor((v + 0.5) * hl / K.height).astype(np.int64), 0, hl - 1)
    return Slab(len(pts), rows, feat.data[rl, cl].astype(np.float32), feat.level)


@dataclass
class VoxelFeatureStack:
    """N x C x V features kept sparse as (row, view, value) entries."""

    n: int
    channels: int
    views: int
    rows: np.ndarray  # (M,)
    view: np.ndarray  # (M,)
    values: np.ndarray  # (M, C)
    level: int = 1

    def occupancy(self) -> np.ndarray:
        occ = np.zeros((self.n, self.views), dtype=bool)
        occ[self.rows, self.view] = True
        return occ

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.channels, self.views), dtype=self.values.dtype)
        out[self.rows, :, self.view] = self.values
        return out

    def slab(self, v: int) -> Slab:
        sel = self.view == v
        return Slab(self.n, self.rows[sel], self.values[sel], self.level)


def stack_views(slabs: Sequence[Slab]) -> VoxelFeatureStack:
    if not slabs:
        raise ValueError("need at least one view")
    n, c, level = slabs[0].n, slabs[0].channels, slabs[0].level
    for s in slabs:
        if s.n != n:
            raise ValueError(f"slabs cover different voxel sets ({s.n} vs {n})")
        if s.channels != c or s.level != level:
            raise ValueError("slabs differ in channel count or level")
    rows = np.concatenate([s.rows for s in slabs]).astype(np.int64)
    view = np.concatenate([np.full(len(s.rows), v, dtype=np.int64) for v, s in enumerate(slabs)])
    values = np.concatenate([s.values for s in slabs]) if rows.size else np.zeros((0, c), np.float32)
    return VoxelFeatureStack(n, c, len(slabs), rows, view, values, level)


# --- view aggregation ----------------------------------------------------------------------

@dataclass
class DoTWeights:
    """Four sparse 3D convolutions (kernels (k, k, k, Cin, Cout) + bias) and a
    max-pool over views, optionally followed by a spatial max over
    ``pool_kernel``^3 active neighbours."""

    level: int
    kernels: List[np.ndarray]
    biases: List[np.ndarray]
    kernel_size: int = 3
    pool_kernel: int = 1

    def __post_init__(self):
        if len(self.kernels) != len(self.biases) or not self.kernels:
            raise ValueError("need matching, non-empty kernel and bias lists")
        k = self.kernel_size
        if k % 2 != 1 or self.pool_kernel % 2 != 1:
            raise ValueError("kernel sizes must be odd")
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            if w.shape[:3] != (k, k, k) or w.ndim != 5:
                raise ValueError(f"layer {i}: kernel shape {w.shape} is not ({k},{k},{k},Cin,Cout)")
            if b.shape != (w.shape[4],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match Cout")
            if i and self.kernels[i - 1].shape[4] != w.shape[3]:
                raise ValueError(f"layer {i}: input channels {w.shape[3]} do not chain")

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[3]

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[4]

    @classmethod
    def _chain(cls, cin, cout, n_layers):
        return [(cin, cout)] + [(cout, cout)] * (n_layers - 1)

    @classmethod
    def identity(cls, level: int, in_channels: Optional[int] = None,
                 out_channels: Optional[int] = None, kernel_size: int = 3,
                 n_layers: int = 4) -> "DoTWeights":
        """Centre-tap identity: output = first ``Cout`` input channels."""
        cin = PYRAMID_CHANNELS[level] if in_channels is None else in_channels
        cout = DOT_CHANNELS[level] if out_channels is None else out_channels
        kernels, biases = [], []
        c = kernel_size // 2
        for a, b in cls._chain(cin, cout, n_layers):
            w = np.zeros((kernel_size,) * 3 + (a, b), dtype=np.float32)
            w[c, c, c] = np.eye(a, b, dtype=np.float32)
            kernels.append(w)
            biases.append(np.zeros(b, dtype=np.float32))
        return cls(level, kernels, biases, kernel_size)

    @classmethod
    def random(cls, level: int, seed: int = 0, in_channels: Optional[int] = None,
               out_channels: Optional[int] = None, kernel_size: int = 3,
               n_layers: int = 4, pool_kernel: int = 1) -> "DoTWeights":
        rng = np.random.default_rng(seed)
        cin = PYRAMID_CHANNELS[level] if in_channels is None else in_channels
        cout = DOT_CHANNELS[level] if out_channels is None else out_channels
        kernels, biases = [], []
        for a, b in cls._chain(cin, cout, n_layers):
            scale = 1.0 / np.sqrt(a * kernel_size ** 3)
            kernels.append((rng.standard_normal((kernel_size,) * 3 + (a, b)) * scale).astype(np.float32))
            biases.append((rng.standard_normal(b) * 0.1).astype(np.float32))
        return cls(level, kernels, biases, kernel_size, pool_kernel)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(b"DOTW")
            fh.write(struct.pack("<6I", 1, self.level, len(self.kernels), self.kernel_size,
                                 self.pool_kernel, 0))
            for w in self.kernels:
                fh.write(struct.pack("<2I", w.shape[3], w.shape[4]))
            for w, b in zip(self.kernels, self.biases):
                fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DoTWeights":
        data = Path(path).read_bytes()
        if data[:4] != b"DOTW":
            raise ValueError(f"{path}: not a DoT weights file")
        version, level, n_layers, k, pool, _ = struct.unpack_from("<6I", data, 4)
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        off = 4 + 24
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<2I", data, off))
            off += 8
        kernels, biases = [], []
        for cin, cout in shapes:
            cnt = k ** 3 * cin * cout
            kernels.append(np.frombuffer(data, "<f4", cnt, off).reshape(k, k, k, cin, cout).copy())
            off += 4 * cnt
            biases.append(np.frombuffer(data, "<f4", cout, off).copy())
            off += 4 * cout
        if off != len(data):
            raise ValueError(f"{path}: {len(data) - off} unexpected trailing bytes")
        return cls(level, kernels, biases, k, pool)


@dataclass
class AggregatedVolume:
    n: int
    rows: np.ndarray
    values: np.ndarray  # (M, C')
    level: int = 1

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.channels), dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


def _key(g: np.ndarray) -> np.ndarray:
    off = np.int64(1 << 20)
    g = np.asarray(g, dtype=np.int64)
    return ((g[:, 0] + off) << 42) | ((g[:, 1] + off) << 21) | (g[:, 2] + off)


def _neighbour_index(coords: np.ndarray, offset) -> np.ndarray:
    """Index into ``coords`` of each site's neighbour at ``offset``, or -1."""
    keys = _key(coords)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    q = _key(coords + np.asarray(offset))
    pos = np.minimum(np.searchsorted(sk, q), len(sk) - 1)
    return np.where(sk[pos] == q, order[pos], -1)


def sparse_conv(coords: np.ndarray, feats: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Submanifold convolution: outputs only at the active ``coords``."""
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros((len(coords), kernel.shape[4]), dtype=np.float64)
    out += bias
    if len(coords) == 0:
        return out
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                nb = _neighbour_index(coords, (dx, dy, dz))
                hit = nb >= 0
                if hit.any():
                    out[hit] += feats[nb[hit]] @ kernel[dx + r, dy + r, dz + r].astype(np.float64)
    return out


def aggregate_dot(stack: VoxelFeatureStack, weights: DoTWeights, coords) -> AggregatedVolume:
    """Per view: the sparse conv chain over that view's active voxels; then the
    element-wise max over the views that saw each voxel."""
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) != stack.n:
        raise ValueError("voxel coordinates do not match the stack size")
    if stack.channels != weights.in_channels:
        raise ValueError(f"stack has {stack.channels} channels, weights expect {weights.in_channels}")
    if weights.level != stack.level:
        raise ValueError(f"weights are for level {weights.level}, stack is level {stack.level}")
    cout = weights.out_channels
    pooled = np.full((stack.n, cout), -np.inf)
    seen = np.zeros(stack.n, dtype=bool)
    for v in range(stack.views):
        sel = stack.view == v
        rows = stack.rows[sel]
        if len(rows) == 0:
            continue
        x = stack.values[sel].astype(np.float64)
        for w, b in zip(weights.kernels, weights.biases):
            x = sparse_conv(coords[rows], x, w, b)
        pooled[rows] = np.maximum(pooled[rows], x)
        seen[rows] = True
    rows = np.flatnonzero(seen)
    vals = pooled[rows]
    if weights.pool_kernel > 1 and len(rows):
        r = weights.pool_kernel // 2
        src = vals.copy()
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    nb = _neighbour_index(coords[rows], (dx, dy, dz))
                    hit = nb >= 0
                    vals[hit] = np.maximum(vals[hit], src[nb[hit]])
    return AggregatedVolume(stack.n, rows, vals.astype(np.float32), stack.level)


@dataclass
class FusedEmbedding:
    n: int
    rows: np.ndarray
    values: np.ndarray  # (M, C_a + C')
    split: int  # channels coming from the point-cloud side


def fuse_embeddings(f3d: Slab, hat: AggregatedVolume) -> FusedEmbedding:
    """Channel concatenation; a voxel missing on one side gets zeros there."""
    if f3d.n != hat.n:
        raise ValueError(f"voxel sets differ ({f3d.n} vs {hat.n})")
    rows = np.union1d(f3d.rows, hat.rows).astype(np.int64)
    ca, cb = f3d.channels, hat.channels
    out = np.zeros((len(rows), ca + cb), dtype=np.float32)
    out[np.searchsorted(rows, f3d.rows), :ca] = f3d.values
    out[np.searchsorted(rows, hat.rows), ca:] = hat.values
    return FusedEmbedding(f3d.n, rows, out, ca)


# --- label votes --------------------------------------------------------------

def label_vote_fusion(slabs: Sequence[Slab], masks: Sequence[IntersectionMask],
                      num_classes: Optional[int] = None) -> np.ndarray:
    """Normalised sum of per-view class probabilities; all-zero rows mean unlabelled."""
    if len(slabs) != len(masks):
        raise ValueError("one mask per view is required")
    if not slabs:
        if num_classes is None:
            raise ValueError("num_classes is needed when there are no views")
        return np.zeros((0, num_classes))
    n, c = slabs[0].n, slabs[0].channels
    acc = np.zeros((n, c), dtype=np.float64)
    for s, m in zip(slabs, masks):
        if s.n != n or len(m) != n:
            raise ValueError("views cover different voxel sets")
        keep = m.mask[s.rows]
        np.add.at(acc, s.rows[keep], s.values[keep].astype(np.float64))
    total = acc.sum(axis=1, keepdims=True)
    return np.divide(acc, total, out=np.zeros_like(acc), where=total > 0)


# --- feature providers --------------------------------------------------------

def _nearest_downsample(raster: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = raster.shape[:2]
    rows = np.minimum(np.floor((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(np.floor((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return raster[rows][:, cols]


@dataclass
class ClassProbabilityProvider:
    """Features = per-pixel class probability (one-hot scaled by the instance
    probability), resampled to the feature raster."""

    num_classes: int = 41
    height: int = 240
    width: int = 320
    level: int = 1

    def features(self, frame_id: str, classes: np.ndarray, probs: np.ndarray) -> FeatureImage:
        c = _nearest_downsample(classes, self.height, self.width)
        p = _nearest_downsample(probs, self.height, self.width)
        out = np.zeros((self.height, self.width, self.num_classes), dtype=np.float32)
        lab = (c > 0) & (c < self.num_classes)
        rr, cc = np.nonzero(lab)
        out[rr, cc, c[lab]] = p[lab]
        return FeatureImage(out, self.level)


def write_feature_raster(path, feat: FeatureImage) -> None:
    h, w, c = feat.data.shape
    with open(path, "wb") as fh:
        fh.write(b"FEAT")
        fh.write(struct.pack("<5I", 1, feat.level, h, w, c))
        fh.write(np.ascontiguousarray(feat.data.transpose(2, 0, 1), dtype="<f4").tobytes())


def read_feature_raster(path) -> FeatureImage:
    data = Path(path).read_bytes()
    if data[:4] != b"FEAT":
        raise ValueError(f"{path}: not a feature raster")
    version, level, h, w, c = struct.unpack_from("<5I", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    if len(data) != 24 + 4 * h * w * c:
        raise ValueError(f"{path}: size does not match header {h}x{w}x{c}")
    planes = np.frombuffer(data, "<f4", h * w * c, 24).reshape(c, h, w)
    return FeatureImage(planes.transpose(1, 2, 0).copy(), level)


@dataclass
class FileFeatureProvider:
    """Replays exported activations stored as ``<root>/<frame_id>_L<level>.feat``."""

    root: Path
    level: int = 1

    def features(self, frame_id: str, classes=None, probs=None) -> FeatureImage:
        feat = read_feature_raster(Path(self.root) / f"{frame_id}_L{self.level}.feat")
        if feat.level != self.level:
            raise ValueError(f"{frame_id}: file holds level {feat.level}, expected {self.level}")
        return feat
