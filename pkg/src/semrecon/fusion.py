"""Sparse block-hashed TSDF volume and marching-cubes meshing.

Voxel ``g`` (integer grid index) is centred at ``origin + g * voxel_size``.
Voxels live in 8x8x8 blocks that are allocated only when a depth
observation updates one of their voxels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .core import CAMERA_FROM_WORLD, Intrinsics, Pose

log = logging.getLogger(__name__)

BLOCK = 8
_NEIGHBOURS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    classes: Optional[np.ndarray] = None  # (V,) per-vertex class id
    colors: Optional[np.ndarray] = None  # (V, 3) uint8

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.vertices)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


class TsdfVolume:
    def __init__(self, voxel_size: float = 0.05, trunc: Optional[float] = None,
                 w_max: float = 128.0, origin=(0.0, 0.0, 0.0)):
        if not voxel_size > 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.trunc = float(trunc) if trunc is not None else 4.0 * self.voxel_size
        if not self.trunc > 0:
            raise ValueError("truncation distance must be positive")
        self.w_max = float(w_max)
        self.origin = np.asarray(origin, dtype=np.float64).copy()
        self._index = {}
        self._coords = np.zeros((0, 3), dtype=np.int64)
        self._tsdf = np.zeros((0, BLOCK, BLOCK, BLOCK), dtype=np.float32)
        self._weight = np.zeros((0, BLOCK, BLOCK, BLOCK), dtype=np.float32)
        self._n = 0

    # -- storage -----------------------------------------------------------
    @property
    def num_blocks(self) -> int:
        return self._n

    @property
    def block_coords(self) -> np.ndarray:
        return self._coords[: self._n]

    def _grow(self, need: int) -> None:
        cap = len(self._coords)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap, 64)
        for name, fill in (("_coords", 0), ("_tsdf", 0.0), ("_weight", 0.0)):
            old = getattr(self, name)
            arr = np.full((new_cap,) + old.shape[1:], fill, dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)

    def _allocate(self, coords: np.ndarray) -> np.ndarray:
        """Slots for the given block coordinates, creating missing blocks."""
        slots = np.empty(len(coords), dtype=np.int64)
        fresh = []
        for i, c in enumerate(map(tuple, coords.tolist())):
            s = self._index.get(c)
            if s is None:
                s = self._n + len(fresh)
                fresh.append(c)
                self._index[c] = s
            slots[i] = s
        if fresh:
            self._grow(self._n + len(fresh))
            self._coords[self._n:self._n + len(fresh)] = fresh
            self._n += len(fresh)
        return slots

    def _drop_tail_unused(self, first_new: int, used: np.ndarray) -> None:
        """Forget blocks allocated at or after ``first_new`` whose ``used`` is False."""
        tail = np.arange(first_new, self._n)
        keep = tail[used[tail]]
        if len(keep) == len(tail):
            return
        for s in tail:
            del self._index[tuple(self._coords[s].tolist())]
        n_keep = len(keep)
        dst = slice(first_new, first_new + n_keep)
        self._coords[dst] = self._coords[keep]
        self._tsdf[dst] = self._tsdf[keep]
        self._weight[dst] = self._weight[keep]
        self._n = first_new + n_keep
        self._tsdf[self._n:] = 0
        self._weight[self._n:] = 0
        for s in range(first_new, self._n):
            self._index[tuple(self._coords[s].tolist())] = s

    def block_of(self, points) -> np.ndarray:
        g = np.floor((np.asarray(points) - self.origin) / self.voxel_size + 0.5).astype(np.int64)
        return np.floor_divide(g, BLOCK)

    def voxel_of(self, points) -> np.ndarray:
        """Integer index of the voxel whose cell contains each point."""
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size + 0.5).astype(np.int64)

    def voxel_center(self, g) -> np.ndarray:
        return self.origin + np.asarray(g, dtype=np.float64) * self.voxel_size

    # -- fusion ------------------------------------------------------------
    def _candidate_blocks(self, depth: np.ndarray, pose: Pose, K: Intrinsics) -> np.ndarray:
        block_len = BLOCK * self.voxel_size
        valid = depth > 0
        if not valid.any():
            return np.zeros((0, 3), dtype=np.int64)
        # ray samples closer than half a block apart, both along and across rays
        far = float(depth[valid].max()) + self.trunc
        stride = max(1, int(0.5 * block_len * min(K.fx, K.fy) / far))
        sub = np.zeros_like(valid)
        sub[::stride, ::stride] = True
        rows, cols = np.nonzero(valid & sub)
        d = depth[rows, cols].astype(np.float64)
        n_steps = int(np.ceil(2 * self.trunc / (0.5 * block_len)))
        offsets = np.linspace(-self.trunc, self.trunc, n_steps + 1)
        world_from_cam = pose.flipped()
        keys = []
        for off in offsets:
            z = d + off
            ok = z > 0
            pc = np.stack([(cols[ok] - K.cx) * z[ok] / K.fx,
                           (rows[ok] - K.cy) * z[ok] / K.fy, z[ok]], axis=1)
            keys.append(np.unique(_linear(self.block_of(world_from_cam.apply(pc)))))
        base = np.unique(np.concatenate(keys))
        # one block of margin absorbs pixel-vs-voxel discretisation
        grown = (_unlinear(base)[:, None, :] + _NEIGHBOURS[None]).reshape(-1, 3)
        return _unlinear(np.unique(_linear(grown)))

    def integrate(self, depth: np.ndarray, pose: Pose, K: Intrinsics) -> int:
        """Fuse one depth frame; returns the number of voxel updates."""
        if pose.convention != CAMERA_FROM_WORLD:
            raise ValueError("integrate needs a camera-from-world pose")
        depth = np.ascontiguousarray(depth, dtype=np.float64)
        cand = self._candidate_blocks(depth, pose, K)
        if len(cand) == 0:
            return 0
        first_new = self._n
        slots = self._allocate(cand)
        R = np.ascontiguousarray(pose.rotation_matrix)
        t = np.ascontiguousarray(pose.translation, dtype=np.float64)
        updated = kernels.integrate_blocks(
            self._tsdf, self._weight, self._coords, slots, self.origin, self.voxel_size,
            R, t, K.fx, K.fy, K.cx, K.cy, depth, self.trunc, self.w_max,
        )
        used = np.ones(self._n, dtype=bool)
        used[slots[updated == 0]] = False
        used[:first_new] = True
        self._drop_tail_unused(first_new, used)
        return int(updated.sum())

    def write_sdf(self, sdf_fn, lo, hi) -> None:
        """Fill voxels inside the box [lo, hi] from a signed distance function.

        Only voxels within the truncation band are stored, with weight 1.
        """
        glo = np.ceil((np.asarray(lo) - self.origin) / self.voxel_size).astype(np.int64)
        ghi = np.floor((np.asarray(hi) - self.origin) / self.voxel_size).astype(np.int64)
        axes = [np.arange(glo[a], ghi[a] + 1) for a in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        s = np.asarray(sdf_fn(self.voxel_center(g)), dtype=np.float64)
        band = np.abs(s) <= self.trunc
        g, s = g[band], s[band]
        blocks = np.floor_divide(g, BLOCK)
        slots = self._allocate(np.unique(blocks, axis=0))
        lookup = {tuple(b): sl for b, sl in zip(np.unique(blocks, axis=0).tolist(), slots.tolist())}
        sl = np.array([lookup[tuple(b)] for b in blocks.tolist()], dtype=np.int64)
        loc = g - blocks * BLOCK
        self._tsdf[sl, loc[:, 0], loc[:, 1], loc[:, 2]] = (s / self.trunc).astype(np.float32)
        self._weight[sl, loc[:, 0], loc[:, 1], loc[:, 2]] = 1.0

    def voxels(self):
        """Observed voxels as (grid index (M, 3), tsdf (M,), weight (M,))."""
        n = self._n
        if n == 0:
            return np.zeros((0, 3), np.int64), np.zeros(0, np.float32), np.zeros(0, np.float32)
        b, i, j, k = np.nonzero(self._weight[:n] > 0)
        g = self._coords[b] * BLOCK + np.stack([i, j, k], axis=1)
        return g, self._tsdf[b, i, j, k], self._weight[b, i, j, k]

    def surface_voxels(self) -> np.ndarray:
        """Grid indices of observed voxels with |tsdf| below one voxel."""
        g, tsdf, _ = self.voxels()
        near = np.abs(tsdf) * self.trunc <= self.voxel_size
        order = np.lexsort((g[near][:, 2], g[near][:, 1], g[near][:, 0]))
        return g[near][order]

    # -- meshing -----------------------------------------------------------
    def _padded_blocks(self, order: np.ndarray):
        nb = len(order)
        tp = np.zeros((nb, BLOCK + 1, BLOCK + 1, BLOCK + 1), dtype=np.float32)
        wp = np.zeros_like(tp)
        tp[:, :BLOCK, :BLOCK, :BLOCK] = self._tsdf[order]
        wp[:, :BLOCK, :BLOCK, :BLOCK] = self._weight[order]
        coords = self._coords[order]
        for off in ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)):
            dst = tuple(slice(BLOCK, BLOCK + 1) if o else slice(0, BLOCK) for o in off)
            src = tuple(slice(0, 1) if o else slice(0, BLOCK) for o in off)
            for row, c in enumerate((coords + off).tolist()):
                s = self._index.get(tuple(c))
                if s is not None:
                    tp[(row,) + dst] = self._tsdf[(s,) + src]
                    wp[(row,) + dst] = self._weight[(s,) + src]
        return tp, wp, coords

    def extract_mesh(self) -> Mesh:
        return extract_mesh(self)


def _weld(keys: np.ndarray, pos: np.ndarray) -> Mesh:
    if len(keys) == 0:
        return Mesh.empty()
    flat_keys = keys.ravel()
    flat_pos = pos.reshape(-1, 3)
    uniq, first, inv = np.unique(flat_keys, return_index=True, return_inverse=True)
    verts = flat_pos[first]
    faces = inv.reshape(-1, 3)
    # coincident vertices from corners that sit exactly on the surface
    q = np.round(verts * 1e6).astype(np.int64)
    _, first2, inv2 = np.unique(q, axis=0, return_index=True, return_inverse=True)
    inv2 = inv2.ravel()
    order = np.argsort(first2, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    verts = verts[first2[order]]
    faces = rank[inv2[faces]]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    mesh = Mesh(verts, faces)
    faces = faces[mesh.triangle_areas() > 0]
    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    return Mesh(verts[used], remap[faces].astype(np.int64))


def extract_mesh(vol: TsdfVolume) -> Mesh:
    """Marching cubes at the tsdf zero level; vertices welded by grid edge.

    Triangles are wound counter-clockwise seen from the free-space side.
    """
    n = vol.num_blocks
    if n == 0:
        return Mesh.empty()
    coords = vol.block_coords
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    tp, wp, bc = vol._padded_blocks(order)
    keys, pos = kernels.mc_triangles(tp, wp, np.ascontiguousarray(bc), vol.origin, vol.voxel_size)
    mesh = _weld(keys, pos)
    mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


@dataclass
class VoxelLabels:
    """Per-voxel class distributions keyed by integer grid index."""

    coords: np.ndarray  # (N, 3) int64
    probs: np.ndarray  # (N, C)
    voxel_size: float
    origin: np.ndarray

    def lookup(self, points) -> np.ndarray:
        """Row of each point's containing voxel, or -1."""
        g = np.floor((np.asarray(points) - self.origin) / self.voxel_size + 0.5).astype(np.int64)
        if len(self.coords) == 0:
            return np.full(len(g), -1, dtype=np.int64)
        return _row_lookup(self.coords, g)

    def neighbourhood(self, points, radius: int = 1) -> np.ndarray:
        """Summed distribution over the (2r+1)^3 voxels around each point."""
        g = np.floor((np.asarray(points) - self.origin) / self.voxel_size + 0.5).astype(np.int64)
        out = np.zeros((len(g), self.probs.shape[1]))
        if len(self.coords) == 0 or len(g) == 0:
            return out
        r = np.arange(-radius, radius + 1)
        for d in np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3):
            rows = _row_lookup(self.coords, g + d)
            hit = rows >= 0
            out[hit] += self.probs[rows[hit]]
        return out


def _linear(g: np.ndarray) -> np.ndarray:
    off = np.int64(1 << 20)
    return ((g[:, 0] + off) << 42) | ((g[:, 1] + off) << 21) | (g[:, 2] + off)


def _unlinear(k: np.ndarray) -> np.ndarray:
    off = np.int64(1 << 20)
    mask = np.int64((1 << 21) - 1)
    return np.stack([(k >> 42) - off, ((k >> 21) & mask) - off, (k & mask) - off], axis=1)


def _row_lookup(table: np.ndarray, query: np.ndarray) -> np.ndarray:
    tk = _linear(table)
    order = np.argsort(tk, kind="stable")
    sk = tk[order]
    qk = _linear(query)
    pos = np.searchsorted(sk, qk)
    pos_c = np.minimum(pos, len(sk) - 1)
    hit = sk[pos_c] == qk
    return np.where(hit, order[pos_c], -1)


def transfer_labels(mesh: Mesh, source, fallback_radius: int = 0) -> Mesh:
    """Give every vertex the argmax class of its label source.

    ``source`` is a :class:`VoxelLabels` or a (V, C) per-vertex distribution.
    With voxel labels, a vertex whose own voxel holds no mass takes the summed
    distribution of voxels within ``fallback_radius`` cells (0 disables this).
    Vertices still without any probability mass get class 0.
    """
    if isinstance(source, VoxelLabels):
        rows = source.lookup(mesh.vertices)
        probs = np.zeros((len(mesh.vertices), source.probs.shape[1]))
        probs[rows >= 0] = source.probs[rows[rows >= 0]]
        if fallback_radius > 0:
            empty = np.flatnonzero(probs.sum(axis=1) <= 0)
            if len(empty):
                probs[empty] = source.neighbourhood(mesh.vertices[empty], fallback_radius)
    elif source is None:
        probs = np.zeros((len(mesh.vertices), 1))
    else:
        probs = np.asarray(source, dtype=np.float64)
        if len(probs) != len(mesh.vertices):
            raise ValueError("per-vertex distribution length differs from vertex count")
    classes = np.where(probs.sum(axis=1) > 0, probs.argmax(axis=1), 0).astype(np.int64)
    return Mesh(mesh.vertices, mesh.faces, classes, mesh.colors)
