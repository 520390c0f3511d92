# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled voxel kernels; see _pykernels for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

from .mctables import CORNERS, EDGES, TRI_TABLE

cnp.import_array()

cdef enum:
    BLOCK = 8
cdef long long KEY_OFFSET = 1 << 19
cdef int KEY_BITS = 20


def integrate_blocks(float[:, :, :, ::1] tsdf, float[:, :, :, ::1] weight,
                     long long[:, ::1] block_coords, long long[::1] slots,
                     double[::1] origin, double voxel_size, double[:, ::1] R, double[::1] t,
                     double fx, double fy, double cx, double cy,
                     double[:, ::1] depth, double trunc, double w_max, chunk=None):
    cdef Py_ssize_t n = slots.shape[0], s, i, j, k
    cdef int h = depth.shape[0], w = depth.shape[1]
    cdef long long slot, iu, iv, count
    cdef double px, py, pz, x, y, z, u, v, d, sdf, wo
    updated = np.zeros(n, dtype=np.int64)
    cdef long long[::1] upd = updated
    with nogil:
        for s in range(n):
            slot = slots[s]
            count = 0
            for i in range(BLOCK):
                px = origin[0] + (block_coords[slot, 0] * BLOCK + i) * voxel_size
                for j in range(BLOCK):
                    py = origin[1] + (block_coords[slot, 1] * BLOCK + j) * voxel_size
                    for k in range(BLOCK):
                        pz = origin[2] + (block_coords[slot, 2] * BLOCK + k) * voxel_size
                        z = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
                        if not z > 0:
                            continue
                        x = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
                        y = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
                        u = floor(fx * x / z + cx + 0.5)
                        v = floor(fy * y / z + cy + 0.5)
                        if u < 0 or u >= w or v < 0 or v >= h:
                            continue
                        iu = <long long>u
                        iv = <long long>v
                        d = depth[iv, iu]
                        sdf = d - z
                        if not (d > 0 and sdf >= -trunc and sdf <= trunc):
                            continue
                        wo = weight[slot, i, j, k]
                        tsdf[slot, i, j, k] = <float>((tsdf[slot, i, j, k] * wo + sdf / trunc) / (wo + 1.0))
                        weight[slot, i, j, k] = <float>(wo + 1.0 if wo + 1.0 < w_max else w_max)
                        count += 1
            upd[s] = count
    return updated


def mc_triangles(float[:, :, :, ::1] tsdf_pad, float[:, :, :, ::1] weight_pad,
                 long long[:, ::1] block_coords, double[::1] origin, double voxel_size):
    cdef Py_ssize_t nb = tsdf_pad.shape[0], b, i, j, k, c, e, q
    cdef long long[:, ::1] corners = np.ascontiguousarray(CORNERS, dtype=np.int64)
    cdef long long[:, ::1] tri = np.ascontiguousarray(TRI_TABLE, dtype=np.int64)
    cdef long long[:, ::1] edges = np.ascontiguousarray(EDGES, dtype=np.int64)
    cdef long long elow[12][3]
    cdef int eaxis[12], elc[12], ehc[12]
    cdef int a0, a1, case, observed, a
    cdef double vals[8]
    cdef double vl, vh, frac
    cdef long long gx, gy, gz, lx, ly, lz

    for e in range(12):
        a0 = edges[e, 0]
        a1 = edges[e, 1]
        for a in range(3):
            elow[e][a] = min(corners[a0, a], corners[a1, a])
            if corners[a0, a] != corners[a1, a]:
                eaxis[e] = a
        if corners[a0, 0] == elow[e][0] and corners[a0, 1] == elow[e][1] and corners[a0, 2] == elow[e][2]:
            elc[e] = a0
            ehc[e] = a1
        else:
            elc[e] = a1
            ehc[e] = a0

    cdef Py_ssize_t cap = 1024, ntri = 0
    keys = np.empty((cap, 3), dtype=np.int64)
    pos = np.empty((cap, 3, 3), dtype=np.float64)
    cdef long long[:, ::1] kv = keys
    cdef double[:, :, ::1] pv = pos

    for b in range(nb):
        for i in range(BLOCK):
            for j in range(BLOCK):
                for k in range(BLOCK):
                    observed = 1
                    case = 0
                    for c in range(8):
                        if not weight_pad[b, i + corners[c, 0], j + corners[c, 1], k + corners[c, 2]] > 0:
                            observed = 0
                            break
                        vals[c] = tsdf_pad[b, i + corners[c, 0], j + corners[c, 1], k + corners[c, 2]]
                        if vals[c] < 0:
                            case |= 1 << c
                    if not observed or case == 0 or case == 255:
                        continue
                    gx = block_coords[b, 0] * BLOCK + i
                    gy = block_coords[b, 1] * BLOCK + j
                    gz = block_coords[b, 2] * BLOCK + k
                    q = 0
                    while q < 15 and tri[case, q] >= 0:
                        if ntri == cap:
                            cap *= 2
                            keys = np.resize(keys, (cap, 3))
                            pos = np.resize(pos, (cap, 3, 3))
                            kv = keys
                            pv = pos
                        for c in range(3):
                            e = tri[case, q + c]
                            lx = gx + elow[e][0]
                            ly = gy + elow[e][1]
                            lz = gz + elow[e][2]
                            vl = vals[elc[e]]
                            vh = vals[ehc[e]]
                            frac = vl / (vl - vh)
                            pv[ntri, c, 0] = origin[0] + (lx + (frac if eaxis[e] == 0 else 0.0)) * voxel_size
                            pv[ntri, c, 1] = origin[1] + (ly + (frac if eaxis[e] == 1 else 0.0)) * voxel_size
                            pv[ntri, c, 2] = origin[2] + (lz + (frac if eaxis[e] == 2 else 0.0)) * voxel_size
                            kv[ntri, c] = ((((lx + KEY_OFFSET) << (2 * KEY_BITS))
                                            | ((ly + KEY_OFFSET) << KEY_BITS)
                                            | (lz + KEY_OFFSET)) << 2) | eaxis[e]
                        ntri += 1
                        q += 3
    return keys[:ntri].copy(), pos[:ntri].copy()
