"""Pinhole cameras, rigid poses and the projection primitives.

Image convention: ``u`` runs along the width, ``v`` along the height, and
integer coordinates sit on pixel centers with the origin at the top-left
pixel. A continuous coordinate ``u`` falls in pixel ``floor(u + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

CAMERA_FROM_WORLD = "camera_from_world"
WORLD_FROM_CAMERA = "world_from_camera"
_CONVENTIONS = (CAMERA_FROM_WORLD, WORLD_FROM_CAMERA)


class ConventionError(ValueError):
    """Raised when poses with different conventions are composed."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics of the same camera resampled to another raster size."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height,
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


class PixelCoord(NamedTuple):
    u: float
    v: float
    depth: float


# --- quaternion helpers, (w, x, y, z) order --------------------------------

def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as a unit quaternion (w, x, y, z) and a translation.

    ``convention`` records which frames the transform maps between. The group
    operations keep it; :meth:`flipped` inverts and swaps it.
    """

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    convention: str = CAMERA_FROM_WORLD

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or np.asarray(self.translation).shape != (3,):
            raise ValueError("rotation must have 4 entries and translation 3")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"rotation quaternion is not unit length (norm {n!r})")
        if self.convention not in _CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")
        object.__setattr__(self, "rotation", tuple(float(c) for c in q))
        object.__setattr__(self, "translation", tuple(float(c) for c in self.translation))

    @classmethod
    def identity(cls, convention: str = CAMERA_FROM_WORLD) -> "Pose":
        return cls(convention=convention)

    @classmethod
    def from_quaternion(cls, q, t, convention: str = CAMERA_FROM_WORLD) -> "Pose":
        q = np.asarray(q, dtype=np.float64)
        return cls(tuple(q / np.linalg.norm(q)), tuple(t), convention)

    @classmethod
    def from_matrix(cls, T, convention: str = CAMERA_FROM_WORLD) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(tuple(matrix_to_quat(T[:3, :3])), tuple(T[:3, 3]), convention)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform (3,) or (N, 3) points; evaluated entrywise for reproducibility."""
        P = np.asarray(points, dtype=np.float64)
        R = self.rotation_matrix
        t = self.translation
        x, y, z = P[..., 0], P[..., 1], P[..., 2]
        out = np.empty(P.shape, dtype=np.float64)
        out[..., 0] = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
        out[..., 1] = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
        out[..., 2] = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
        return out

    def flipped(self) -> "Pose":
        """Inverse transform labelled with the opposite convention."""
        inv = inverse(self)
        other = WORLD_FROM_CAMERA if self.convention == CAMERA_FROM_WORLD else CAMERA_FROM_WORLD
        return Pose(inv.rotation, inv.translation, other)

    def as_camera_from_world(self) -> "Pose":
        return self if self.convention == CAMERA_FROM_WORLD else self.flipped()

    def as_world_from_camera(self) -> "Pose":
        return self if self.convention == WORLD_FROM_CAMERA else self.flipped()

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        """Equality up to quaternion sign."""
        qa, qb = np.asarray(self.rotation), np.asarray(other.rotation)
        same_rot = min(np.abs(qa - qb).max(), np.abs(qa + qb).max()) <= atol
        same_t = np.abs(np.subtract(self.translation, other.translation)).max() <= atol
        return bool(same_rot and same_t and self.convention == other.convention)


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    if a.convention != b.convention:
        raise ConventionError(f"cannot compose {a.convention} with {b.convention}")
    q = quat_multiply(a.rotation, b.rotation)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    t = a.apply(np.asarray(b.translation))
    return Pose(tuple(q), tuple(t), a.convention)


def inverse(p: Pose) -> Pose:
    w, x, y, z = p.rotation
    qi = np.array([w, -x, -y, -z])
    t = -(quat_to_matrix(qi) @ np.asarray(p.translation))
    return Pose(tuple(qi), tuple(t), p.convention)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-from-world pose for a camera at ``eye`` looking at ``target``.

    Camera axes: +z forward, +x right, +y down (image v direction).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=1)
    T = np.eye(4)
    T[:3, :3] = R_wc.T
    T[:3, 3] = -R_wc.T @ eye
    return Pose.from_matrix(T, CAMERA_FROM_WORLD)


# --- projection -------------------------------------------------------------

def pixel_index(coord):
    """Pixel containing a continuous image coordinate."""
    return np.floor(np.asarray(coord) + 0.5).astype(np.int64)


def project_points(K: Intrinsics, T_cw: Pose, points):
    """Vectorised projection.

    Returns ``(u, v, z, valid)`` where ``valid`` marks points in front of the
    camera whose pixel lies inside the raster.
    """
    if T_cw.convention != CAMERA_FROM_WORLD:
        raise ConventionError("project needs a camera-from-world pose")
    Pc = T_cw.apply(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    z = Pc[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = K.fx * Pc[:, 0] / zs + K.cx
    v = K.fy * Pc[:, 1] / zs + K.cy
    iu, iv = pixel_index(u), pixel_index(v)
    valid = front & (iu >= 0) & (iu < K.width) & (iv >= 0) & (iv < K.height)
    return u, v, z, valid


def project(K: Intrinsics, T_cw: Pose, P) -> Optional[PixelCoord]:
    u, v, z, valid = project_points(K, T_cw, np.asarray(P, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return PixelCoord(float(u[0]), float(v[0]), float(z[0]))


def unproject(K: Intrinsics, px, depth: float) -> np.ndarray:
    """Camera-frame point seen at pixel ``px`` (u, v) at ``depth`` meters."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth!r}")
    u, v = float(px[0]), float(px[1])
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, float(depth)])


def unproject_depth(K: Intrinsics, depth: np.ndarray) -> np.ndarray:
    """Back-project a whole depth raster to an (H, W, 3) camera-frame cloud.

    Invalid (zero) depth yields zero points.
    """
    h, w = depth.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d = depth.astype(np.float64)
    return np.stack([(uu - K.cx) * d / K.fx, (vv - K.cy) * d / K.fy, d], axis=-1)
