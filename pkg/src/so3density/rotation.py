"""SO(3) algebra on canonical unit quaternions.

A rotation is stored as a unit quaternion (w, x, y, z) with the sign fixed
so that w >= 0 (tie broken by the first nonzero component being positive).
Matrix, axis-angle and Euler views are materialized on demand.  Collections
of rotations are plain (N, 4) float64 arrays; the scalar `Rotation` wrapper
is for API edges and tests.

All functions are pure; random sampling takes an explicit seed or Generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Rotation",
    "AxisAngle",
    "DegenerateMatrix",
    "compose",
    "geodesic_distance",
    "sample_uniform",
    "sample_uniform_quats",
    "project_to_so3",
    "convert",
    "canonicalize_quats",
    "quat_multiply",
    "quat_conjugate",
    "quats_to_matrices",
    "matrices_to_quats",
    "quat_angles",
    "as_quat_array",
    "quats_to_bytes",
    "quats_from_bytes",
]

_UNIT_TOL = 1e-9


class DegenerateMatrix(ValueError):
    """Raised when a matrix is too close to singular to project onto SO(3)."""


def canonicalize_quats(q):
    """Fix quaternion signs: w >= 0, ties broken by first nonzero component.

    Accepts (..., 4); returns a new array of the same shape.
    """
    q = np.asarray(q, dtype=np.float64)
    flat = q.reshape(-1, 4).copy()
    w = flat[:, 0]
    flip = w < 0.0
    tie = w == 0.0
    if np.any(tie):
        for k in (1, 2, 3):
            col = flat[:, k]
            flip |= tie & (col < 0.0)
            tie &= col == 0.0
    flat[flip] *= -1.0
    return flat.reshape(q.shape)


def _normalize_quats(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion has no direction")
    return q / norm


def quat_multiply(a, b):
    """Hamilton product, scalar-first, broadcasting over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def quats_to_matrices(q):
    """Convert (..., 4) unit quaternions to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def matrices_to_quats(m):
    """Convert (..., 3, 3) rotation matrices to canonical unit quaternions.

    Uses the largest of the four Shepperd candidates for stability.
    """
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    n = flat.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    tr = np.trace(flat, axis1=1, axis2=2)
    # Four squared magnitudes: (w, x, y, z); pick the largest per matrix.
    cand = np.stack(
        [
            1.0 + tr,
            1.0 + flat[:, 0, 0] - flat[:, 1, 1] - flat[:, 2, 2],
            1.0 - flat[:, 0, 0] + flat[:, 1, 1] - flat[:, 2, 2],
            1.0 - flat[:, 0, 0] - flat[:, 1, 1] + flat[:, 2, 2],
        ],
        axis=1,
    )
    best = np.argmax(cand, axis=1)
    for i in range(n):
        a = flat[i]
        k = best[i]
        s = 2.0 * math.sqrt(max(cand[i, k], 0.0))
        if k == 0:
            q[i] = (0.25 * s,
                    (a[2, 1] - a[1, 2]) / s,
                    (a[0, 2] - a[2, 0]) / s,
                    (a[1, 0] - a[0, 1]) / s)
        elif k == 1:
            q[i] = ((a[2, 1] - a[1, 2]) / s,
                    0.25 * s,
                    (a[0, 1] + a[1, 0]) / s,
                    (a[0, 2] + a[2, 0]) / s)
        elif k == 2:
            q[i] = ((a[0, 2] - a[2, 0]) / s,
                    (a[0, 1] + a[1, 0]) / s,
                    0.25 * s,
                    (a[1, 2] + a[2, 1]) / s)
        else:
            q[i] = ((a[1, 0] - a[0, 1]) / s,
                    (a[0, 2] + a[2, 0]) / s,
                    (a[1, 2] + a[2, 1]) / s,
                    0.25 * s)
    return canonicalize_quats(_normalize_quats(q)).reshape(m.shape[:-2] + (4,))


def quat_angles(a, b):
    """Geodesic distance 2*arccos(|<a, b>|) between quaternion arrays, radians."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dots = np.abs(np.sum(a * b, axis=-1))
    return 2.0 * np.arccos(np.clip(dots, 0.0, 1.0))


@dataclass(frozen=True)
class AxisAngle:
    """Unit axis plus rotation angle in [0, pi]."""

    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise ValueError("axis must be nonzero")
        object.__setattr__(self, "axis", axis / norm)
        if not 0.0 <= self.angle <= math.pi + 1e-12:
            raise ValueError(f"angle {self.angle} outside [0, pi]")


class Rotation:
    """A single 3D rotation; immutable, canonical quaternion storage."""

    __slots__ = ("_q",)

    def __init__(self, quaternion):
        q = _normalize_quats(np.asarray(quaternion, dtype=np.float64).reshape(4))
        q = canonicalize_quats(q)
        q.setflags(write=False)
        self._q = q

    @property
    def quaternion(self):
        """Canonical (w, x, y, z) unit quaternion, read-only."""
        return self._q

    @property
    def matrix(self):
        """3x3 rotation matrix view."""
        return quats_to_matrices(self._q)

    @classmethod
    def identity(cls):
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, m):
        return cls(matrices_to_quats(np.asarray(m, dtype=np.float64).reshape(3, 3)))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * float(angle)
        return cls(np.concatenate([[math.cos(half)], math.sin(half) * axis]))

    @classmethod
    def rot_x(cls, angle):
        return cls.from_axis_angle((1.0, 0.0, 0.0), angle)

    @classmethod
    def rot_y(cls, angle):
        return cls.from_axis_angle((0.0, 1.0, 0.0), angle)

    @classmethod
    def rot_z(cls, angle):
        return cls.from_axis_angle((0.0, 0.0, 1.0), angle)

    @classmethod
    def from_euler_zyx(cls, yaw, pitch, roll):
        """Intrinsic z-y-x: R = Rz(yaw) Ry(pitch) Rx(roll)."""
        return compose(cls.rot_z(yaw), compose(cls.rot_y(pitch), cls.rot_x(roll)))

    def inverse(self):
        return Rotation(quat_conjugate(self._q))

    def apply(self, v):
        """Rotate one or more 3-vectors."""
        return np.asarray(v, dtype=np.float64) @ self.matrix.T

    def axis_angle(self):
        w = min(self._q[0], 1.0)
        angle = 2.0 * math.acos(w)
        s = math.sqrt(max(1.0 - w * w, 0.0))
        if s < 1e-12:
            return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
        return AxisAngle(self._q[1:] / s, min(angle, math.pi))

    def euler_zyx(self):
        """(yaw, pitch, roll); many-to-one at |pitch| = pi/2 (gimbal lock)."""
        m = self.matrix
        pitch = -math.asin(min(1.0, max(-1.0, m[2, 0])))
        if abs(m[2, 0]) > 1.0 - 1e-12:
            # Gimbal lock: only yaw +/- roll is determined; put it all in yaw.
            yaw = math.atan2(-m[0, 1], m[1, 1])
            roll = 0.0
        else:
            yaw = math.atan2(m[1, 0], m[0, 0])
            roll = math.atan2(m[2, 1], m[2, 2])
        return yaw, pitch, roll

    def __repr__(self):
        w, x, y, z = self._q
        return f"Rotation(({w:.6f}, {x:.6f}, {y:.6f}, {z:.6f}))"


def as_quat_array(rotations):
    """Coerce a Rotation, sequence of Rotations, or (N, 4) array to (N, 4)."""
    if isinstance(rotations, Rotation):
        return rotations.quaternion.reshape(1, 4)
    if isinstance(rotations, np.ndarray):
        if rotations.ndim == 1:
            return rotations.reshape(1, 4).astype(np.float64)
        return np.asarray(rotations, dtype=np.float64)
    return np.stack([r.quaternion for r in rotations])


def compose(a: Rotation, b: Rotation) -> Rotation:
    """Composition a∘b: apply b first, then a."""
    return Rotation(quat_multiply(a.quaternion, b.quaternion))


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    """Rotation angle of a⁻¹b in [0, pi]; symmetric and bi-invariant."""
    return float(quat_angles(a.quaternion, b.quaternion))


def sample_uniform_quats(rng, n):
    """(n, 4) Haar-uniform canonical quaternions from a Generator or seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    q = rng.standard_normal((n, 4))
    return canonicalize_quats(_normalize_quats(q))


def sample_uniform(rng_seed, n):
    """Draw n Haar-uniform rotations; deterministic for a given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    q = sample_uniform_quats(rng_seed, n)
    return [Rotation(q[i]) for i in range(n)]


def project_to_so3(m) -> Rotation:
    """Nearest rotation in Frobenius norm (orthogonal Procrustes via SVD)."""
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    u, s, vt = np.linalg.svd(m)
    if s[-1] < 1e-12:
        raise DegenerateMatrix(f"smallest singular value {s[-1]:.3e} < 1e-12")
    d = np.sign(np.linalg.det(u @ vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return Rotation.from_matrix(r)


def convert(r: Rotation, format: str):
    """Export a rotation as 'matrix', 'quaternion', 'axis_angle' or 'euler_zyx'."""
    if format == "matrix":
        return r.matrix
    if format == "quaternion":
        return r.quaternion.copy()
    if format == "axis_angle":
        return r.axis_angle()
    if format == "euler_zyx":
        return np.array(r.euler_zyx())
    raise ValueError(f"unknown rotation format {format!r}")


def quats_to_bytes(q):
    """Serialize (N, 4) quaternions as little-endian float64, canonical sign."""
    q = canonicalize_quats(as_quat_array(q))
    return np.ascontiguousarray(q, dtype="<f8").tobytes()


def quats_from_bytes(raw, count=None):
    q = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(-1, 4)
    if count is not None and q.shape[0] != count:
        raise ValueError(f"expected {count} quaternions, found {q.shape[0]}")
    return q
