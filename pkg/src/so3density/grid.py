"""Hierarchical equivolumetric grids on SO(3).

Level L threads 6*2^L evenly spaced tilt angles through each of the
12*4^L HEALPix pixel centers of the 2-sphere, giving N = 72*8^L rotations
that partition SO(3) into cells of equal Haar volume V = pi^2 / N.
Ordering is pixel-major (HEALPix ring order), then tilt, so regeneration
is byte-identical.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .rotation import Rotation, canonicalize_quats, quat_angles, quat_conjugate, quat_multiply

__all__ = [
    "EquivolumetricGrid",
    "LevelTooLarge",
    "MAX_LEVEL",
    "generate_grid",
    "grid_size",
    "healpix_pixel_centers",
    "tilt_angles",
    "hopf_to_quats",
    "nearest_cell",
    "nearest_cell_scan",
    "rotate_grid",
    "median_nn_spacing",
    "write_grid",
    "read_grid",
    "GRID_MAGIC",
]

MAX_LEVEL = 6
GRID_MAGIC = b"SO3G"

HAAR_VOLUME = math.pi ** 2


class LevelTooLarge(ValueError):
    """Raised for grid levels past the memory guard (level 6 is 18.9M cells)."""


def grid_size(level: int) -> int:
    return 72 * 8 ** level


def healpix_pixel_centers(nside: int):
    """Ring-scheme HEALPix pixel centers (colatitude theta, longitude phi).

    Closed forms: polar caps z = 1 - i^2/(3 nside^2) with 4i pixels on
    ring i; equatorial belt z = 4/3 - 2i/(3 nside) with 4 nside pixels.
    Returns two arrays of length 12*nside^2 in ring order.
    """
    thetas = []
    phis = []
    # North polar cap: rings i = 1 .. nside-1.
    for i in range(1, nside):
        z = 1.0 - i * i / (3.0 * nside * nside)
        j = np.arange(1, 4 * i + 1)
        thetas.append(np.full(4 * i, math.acos(z)))
        phis.append((math.pi / (2.0 * i)) * (j - 0.5))
    # Equatorial belt: rings i = nside .. 3*nside.
    for i in range(nside, 3 * nside + 1):
        z = 4.0 / 3.0 - 2.0 * i / (3.0 * nside)
        s = (i - nside + 1) % 2
        j = np.arange(1, 4 * nside + 1)
        thetas.append(np.full(4 * nside, math.acos(z)))
        phis.append((math.pi / (2.0 * nside)) * (j - 0.5 * s))
    # South polar cap mirrors the north.
    for i in range(nside - 1, 0, -1):
        z = -(1.0 - i * i / (3.0 * nside * nside))
        j = np.arange(1, 4 * i + 1)
        thetas.append(np.full(4 * i, math.acos(z)))
        phis.append((math.pi / (2.0 * i)) * (j - 0.5))
    theta = np.concatenate(thetas)
    phi = np.mod(np.concatenate(phis), 2.0 * math.pi)
    return theta, phi


def tilt_angles(level: int):
    """Fiber tilts psi_k = (k + 1/2) * 2 pi / (6 * 2^level)."""
    count = 6 * 2 ** level
    return (np.arange(count) + 0.5) * (2.0 * math.pi / count)


def hopf_to_quats(theta, phi, psi):
    """Hopf coordinates (theta, phi on S^2; fiber angle psi) to quaternions."""
    ct = np.cos(theta / 2.0)
    st = np.sin(theta / 2.0)
    q = np.stack(
        [
            ct * np.cos(psi / 2.0),
            ct * np.sin(psi / 2.0),
            st * np.cos(phi + psi / 2.0),
            st * np.sin(phi + psi / 2.0),
        ],
        axis=-1,
    )
    return canonicalize_quats(q)


@dataclass(frozen=True)
class EquivolumetricGrid:
    """Immutable SO(3) grid: level, (N, 4) canonical quaternions, cell volume."""

    level: int
    quaternions: np.ndarray
    matrices: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.quaternions.shape != (grid_size(self.level), 4):
            raise ValueError("quaternion array does not match the level count")
        self.quaternions.setflags(write=False)

    def __len__(self):
        return self.quaternions.shape[0]

    @property
    def cell_volume(self) -> float:
        return HAAR_VOLUME / len(self)

    def rotation(self, i: int) -> Rotation:
        return Rotation(self.quaternions[i])

    def rotation_matrices(self):
        """(N, 3, 3) matrix views, computed once and cached on the instance."""
        if self.matrices is None:
            from .rotation import quats_to_matrices

            object.__setattr__(self, "matrices", quats_to_matrices(self.quaternions))
            self.matrices.setflags(write=False)
        return self.matrices


_GRID_CACHE: dict[int, EquivolumetricGrid] = {}


def generate_grid(level: int) -> EquivolumetricGrid:
    """Build (and memoize) the level-L grid of 72*8^L rotations."""
    if not 0 <= level:
        raise ValueError("level must be >= 0")
    if level > MAX_LEVEL:
        raise LevelTooLarge(f"level {level} exceeds guard ({MAX_LEVEL})")
    cached = _GRID_CACHE.get(level)
    if cached is not None:
        return cached
    nside = 2 ** level
    theta, phi = healpix_pixel_centers(nside)
    psi = tilt_angles(level)
    n_pix, n_tilt = theta.shape[0], psi.shape[0]
    # Pixel-major, then tilt.
    q = hopf_to_quats(
        np.repeat(theta, n_tilt), np.repeat(phi, n_tilt), np.tile(psi, n_pix)
    )
    grid = EquivolumetricGrid(level=level, quaternions=q)
    _GRID_CACHE[level] = grid
    return grid


def nearest_cell(grid: EquivolumetricGrid, r) -> int:
    """Index of the grid cell nearest to r (ties -> lowest index).

    Vectorized over |<q_i, q>|; equivalent to minimizing geodesic distance.
    """
    q = r.quaternion if isinstance(r, Rotation) else np.asarray(r, dtype=np.float64)
    dots = np.abs(grid.quaternions @ q)
    return int(np.argmax(dots))


def nearest_cell_scan(grid: EquivolumetricGrid, r) -> int:
    """Reference linear scan; must agree exactly with nearest_cell."""
    q = r.quaternion if isinstance(r, Rotation) else np.asarray(r, dtype=np.float64)
    dots = grid.quaternions @ q
    best, best_dot = 0, -1.0
    for i in range(dots.shape[0]):
        d = abs(dots[i])
        if d > best_dot:
            best, best_dot = i, d
    return best


def rotate_grid(grid: EquivolumetricGrid, target: Rotation):
    """Left-translate the grid so element 0 lands on target.

    Returns the (N, 4) canonical quaternions of {target * R0^-1 * R_i};
    left translation preserves all pairwise geodesic distances.
    """
    left = quat_multiply(target.quaternion, quat_conjugate(grid.quaternions[0]))
    return canonicalize_quats(quat_multiply(left, grid.quaternions))


def median_nn_spacing(grid: EquivolumetricGrid, max_samples: int = 2048) -> float:
    """Median nearest-neighbor geodesic distance, radians.

    Exact for small grids; for large ones a deterministic strided subsample
    of cells is measured against the full grid.
    """
    n = len(grid)
    if n <= max_samples:
        idx = np.arange(n)
    else:
        idx = np.arange(0, n, n // max_samples)[:max_samples]
    q = grid.quaternions
    sub = q[idx]
    nn = np.empty(sub.shape[0])
    block = 256
    for s in range(0, sub.shape[0], block):
        dots = np.abs(sub[s : s + block] @ q.T)
        for row, i in enumerate(idx[s : s + block]):
            dots[row, i] = -1.0  # exclude self
        nn[s : s + block] = 2.0 * np.arccos(np.clip(dots.max(axis=1), 0.0, 1.0))
    return float(np.median(nn))


def write_grid(grid: EquivolumetricGrid, path) -> None:
    """Grid file: magic 'SO3G', u8 version=1, u8 level, u64 count, N*4 LE f64."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<BB", 1, grid.level))
        fh.write(struct.pack("<Q", len(grid)))
        fh.write(np.ascontiguousarray(grid.quaternions, dtype="<f8").tobytes())


def read_grid(path) -> EquivolumetricGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    return grid_from_bytes(data, str(path))


def grid_from_bytes(data: bytes, name: str = "<bytes>") -> EquivolumetricGrid:
    fh = io.BytesIO(data)
    magic = fh.read(4)
    if magic != GRID_MAGIC:
        raise ValueError(f"{name}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
    version, level = struct.unpack("<BB", fh.read(2))
    if version != 1:
        raise ValueError(f"{name}: unsupported grid file version {version}")
    (count,) = struct.unpack("<Q", fh.read(8))
    if count != grid_size(level):
        raise ValueError(f"{name}: count {count} does not match level {level}")
    q = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64).reshape(-1, 4)
    if q.shape[0] != count:
        raise ValueError(f"{name}: truncated payload")
    return EquivolumetricGrid(level=level, quaternions=q)
