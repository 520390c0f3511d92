"""Pure numpy implementations of the voxel kernels.

Both backends share signatures and evaluation order so results agree to
the last bit on IEEE hardware without fused multiply-add.
"""
import numpy as np

from .mctables import CORNERS, EDGES, TRI_TABLE

BLOCK = 8
_LOCAL = np.stack(np.meshgrid(np.arange(BLOCK), np.arange(BLOCK), np.arange(BLOCK),
                              indexing="ij"), axis=-1).reshape(-1, 3)

# per edge: lower corner offset and axis
_EDGE_LOW = np.minimum(CORNERS[EDGES[:, 0]], CORNERS[EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(CORNERS[EDGES[:, 1]] - CORNERS[EDGES[:, 0]]), axis=1)
_EDGE_LOW_CORNER = np.where((CORNERS[EDGES[:, 0]] == _EDGE_LOW).all(1), EDGES[:, 0], EDGES[:, 1])
_EDGE_HIGH_CORNER = np.where(_EDGE_LOW_CORNER == EDGES[:, 0], EDGES[:, 1], EDGES[:, 0])

KEY_OFFSET = 1 << 19
KEY_BITS = 20


def edge_key(gx, gy, gz, axis):
    """Pack a voxel-grid edge (lower corner + axis) into one int64."""
    gx = np.asarray(gx, dtype=np.int64) + KEY_OFFSET
    gy = np.asarray(gy, dtype=np.int64) + KEY_OFFSET
    gz = np.asarray(gz, dtype=np.int64) + KEY_OFFSET
    return (((gx << (2 * KEY_BITS)) | (gy << KEY_BITS) | gz) << 2) | np.asarray(axis, dtype=np.int64)


def integrate_blocks(tsdf, weight, block_coords, slots, origin, voxel_size,
                     R, t, fx, fy, cx, cy, depth, trunc, w_max, chunk=2048):
    """Fuse one depth frame into the given block slots in place.

    Returns the number of voxels updated per slot.
    """
    h, w = depth.shape
    updated = np.zeros(len(slots), dtype=np.int64)
    for s0 in range(0, len(slots), chunk):
        sl = slots[s0:s0 + chunk]
        g = block_coords[sl][:, None, :] * BLOCK + _LOCAL[None]
        px = origin[0] + g[..., 0] * voxel_size
        py = origin[1] + g[..., 1] * voxel_size
        pz = origin[2] + g[..., 2] * voxel_size
        x = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        y = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        z = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        iu = np.floor(fx * x / zs + cx + 0.5)
        iv = np.floor(fy * y / zs + cy + 0.5)
        ok = front & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        iu = np.where(ok, iu, 0).astype(np.int64)
        iv = np.where(ok, iv, 0).astype(np.int64)
        d = depth[iv, iu]
        sdf = d - z
        ok &= (d > 0) & (sdf >= -trunc) & (sdf <= trunc)
        if not ok.any():
            continue
        T = tsdf[sl].reshape(len(sl), -1)
        W = weight[sl].reshape(len(sl), -1)
        wo = W[ok].astype(np.float64)
        T[ok] = ((T[ok].astype(np.float64) * wo + sdf[ok] / trunc) / (wo + 1.0)).astype(np.float32)
        W[ok] = np.minimum(wo + 1.0, w_max).astype(np.float32)
        tsdf[sl] = T.reshape(-1, BLOCK, BLOCK, BLOCK)
        weight[sl] = W.reshape(-1, BLOCK, BLOCK, BLOCK)
        updated[s0:s0 + len(sl)] = ok.sum(axis=1)
    return updated


def mc_triangles(tsdf_pad, weight_pad, block_coords, origin, voxel_size):
    """Marching cubes over padded (nb, 9, 9, 9) blocks.

    Returns ``(keys, pos)``: per triangle the three edge keys (T, 3) and the
    interpolated vertex positions (T, 3, 3). Cubes with an unobserved corner
    are skipped.
    """
    nb = tsdf_pad.shape[0]
    if nb == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, 3, 3))
    vals = np.stack([tsdf_pad[:, c[0]:c[0] + 8, c[1]:c[1] + 8, c[2]:c[2] + 8] for c in CORNERS], -1)
    wts = np.stack([weight_pad[:, c[0]:c[0] + 8, c[1]:c[1] + 8, c[2]:c[2] + 8] for c in CORNERS], -1)
    observed = (wts > 0).all(-1)
    case = ((vals < 0).astype(np.int64) << np.arange(8)).sum(-1)
    active = observed & (case > 0) & (case < 255)
    b, i, j, k = np.nonzero(active)
    if len(b) == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, 3, 3))
    cases = case[b, i, j, k]
    cv = vals[b, i, j, k].astype(np.float64)  # (M, 8)
    edges = TRI_TABLE[cases]  # (M, 16)
    m_idx, slot = np.nonzero(edges[:, :15] >= 0)
    e = edges[m_idx, slot]
    base = block_coords[b[m_idx]] * BLOCK + np.stack([i[m_idx], j[m_idx], k[m_idx]], 1)
    low = base + _EDGE_LOW[e]
    axis = _EDGE_AXIS[e]
    vl = cv[m_idx, _EDGE_LOW_CORNER[e]]
    vh = cv[m_idx, _EDGE_HIGH_CORNER[e]]
    frac = vl / (vl - vh)
    pos = np.empty((len(e), 3))
    for a in range(3):
        pos[:, a] = origin[a] + (low[:, a] + np.where(axis == a, frac, 0.0)) * voxel_size
    keys = edge_key(low[:, 0], low[:, 1], low[:, 2], axis)
    return keys.reshape(-1, 3), pos.reshape(-1, 3, 3)
