"""Distribution evaluation over a grid, single-pose prediction, mode extraction.

The normalized density at grid cell i is softmax(f)_i / V with V the cell
volume, so densities sum to 1 when multiplied by V.  Single-pose prediction
refines the grid argmax with projected gradient ascent on the rotation-matrix
entries.  Modes are connected components of above-floor cells under a
link-radius graph, ranked by probability mass.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .grid import EquivolumetricGrid, median_nn_spacing, nearest_cell
from .model import input_gradient
from .rotation import Rotation, as_quat_array, project_to_so3, quat_angles

__all__ = [
    "PoseDistribution",
    "Mode",
    "ModeSet",
    "EmptyModeSet",
    "evaluate_distribution",
    "evaluate_distributions",
    "grid_scores",
    "predict_pose",
    "extract_modes",
    "top_k_candidates",
    "spike_distribution",
    "write_distribution",
    "read_distribution",
    "DIST_MAGIC",
]

HAAR_VOLUME = math.pi ** 2
DIST_MAGIC = b"SO3D"
_QUERY_CHUNK = 8192


class EmptyModeSet(ValueError):
    """No cell passed the density floor (near-uniform prediction)."""


@dataclass(frozen=True)
class PoseDistribution:
    """Per-cell probability densities over an equivolumetric grid."""

    grid_level: int
    densities: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.densities, dtype=np.float64)
        object.__setattr__(self, "densities", d)
        if np.any(d < 0.0):
            raise ValueError("densities must be nonnegative")
        total = d.sum() * (HAAR_VOLUME / d.shape[0])
        if not math.isclose(total, 1.0, abs_tol=1e-6):
            raise ValueError(f"densities integrate to {total}, not 1")

    @property
    def cell_volume(self) -> float:
        return HAAR_VOLUME / self.densities.shape[0]


def grid_scores(model, descriptor, grid: EquivolumetricGrid, dtype=np.float64):
    """Unnormalized log densities f(x, R_i) over all grid cells, chunked."""
    n = len(grid)
    out = np.empty(n)
    d = np.asarray(descriptor, dtype=np.float64).reshape(1, -1)
    for s in range(0, n, _QUERY_CHUNK):
        chunk = grid.quaternions[s : s + _QUERY_CHUNK]
        out[s : s + chunk.shape[0]] = model_mod.forward_batch_efficient(
            model, d, chunk, dtype=dtype
        )[0]
    return out


def _scores_to_densities(scores):
    f = np.asarray(scores, dtype=np.float64)
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return p * (f.shape[-1] / HAAR_VOLUME)


def evaluate_distribution(model, descriptor, grid: EquivolumetricGrid,
                          dtype=np.float64) -> PoseDistribution:
    """Normalized pose distribution for one descriptor."""
    scores = grid_scores(model, descriptor, grid, dtype=dtype)
    return PoseDistribution(grid_level=grid.level, densities=_scores_to_densities(scores))


def evaluate_distributions(model, descriptors, grid: EquivolumetricGrid,
                           dtype=np.float32, desc_chunk: int = 16):
    """(B, N) densities for many descriptors sharing one grid.

    Uses the split first layer so the query block of the first layer is
    applied to each grid chunk once per descriptor chunk; float32 scoring
    by default since eval batches dominate runtime.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    n = len(grid)
    out = np.empty((desc.shape[0], n))
    for s in range(0, desc.shape[0], desc_chunk):
        block = desc[s : s + desc_chunk]
        scores = np.empty((block.shape[0], n))
        for qs in range(0, n, _QUERY_CHUNK):
            chunk = grid.quaternions[qs : qs + _QUERY_CHUNK]
            scores[:, qs : qs + chunk.shape[0]] = model_mod.forward_batch_efficient(
                model, block, chunk, dtype=dtype
            )
        out[s : s + block.shape[0]] = _scores_to_densities(scores)
    return out


def predict_pose(model, descriptor, grid: EquivolumetricGrid,
                 ascent_steps: int = 100, step_size: float = 1e-3,
                 return_trace: bool = False):
    """Grid argmax refined by projected gradient ascent on matrix entries.

    Each step proposes project_to_so3(M + step * grad f); a non-improving
    proposal is retried with a halved step (at most 10 halvings) and the
    ascent stops if no improvement is found.  The result never scores below
    the grid argmax.
    """
    scores = grid_scores(model, descriptor, grid)
    best = int(np.argmax(scores))
    current = grid.rotation(best)
    f_cur = float(scores[best])
    trace = [f_cur]
    for _ in range(ascent_steps):
        g = input_gradient(model, descriptor, current)
        step = step_size
        accepted = False
        for _ in range(11):
            cand = project_to_so3(current.matrix + step * g)
            f_new = float(model_mod.forward(model, descriptor, cand)[0])
            if f_new > f_cur:
                current, f_cur = cand, f_new
                accepted = True
                break
            step *= 0.5
        trace.append(f_cur)
        if not accepted:
            break
    if return_trace:
        return current, trace
    return current


@dataclass(frozen=True)
class Mode:
    center: Rotation
    mass: float
    member_cells: np.ndarray


@dataclass(frozen=True)
class ModeSet:
    modes: list

    def __len__(self):
        return len(self.modes)

    @property
    def total_mass(self) -> float:
        return sum(m.mass for m in self.modes)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def extract_modes(dist: PoseDistribution, grid: EquivolumetricGrid,
                  density_floor: float = 2.0,
                  link_radius: float | None = None) -> ModeSet:
    """Connected components of cells above density_floor x uniform density.

    Cells closer than link_radius (default: twice the grid's median
    nearest-neighbor spacing) join one mode; each mode's center is its
    densest cell and modes are ranked by total probability mass.
    """
    if density_floor <= 0.0:
        raise ValueError("density_floor must be > 0")
    if link_radius is None:
        link_radius = 2.0 * median_nn_spacing(grid)
    if link_radius <= 0.0:
        raise ValueError("link_radius must be > 0")
    dens = dist.densities
    keep = np.flatnonzero(dens >= density_floor / HAAR_VOLUME)
    if keep.size == 0:
        raise EmptyModeSet(f"no cell is {density_floor}x above uniform")
    quats = grid.quaternions[keep]
    uf = _UnionFind(keep.size)
    cos_half = math.cos(link_radius / 2.0)  # angle < r  <=>  |dot| > cos(r/2)
    block = 512
    for s in range(0, keep.size, block):
        dots = np.abs(quats[s : s + block] @ quats.T)
        rows, cols = np.nonzero(dots > cos_half)
        for r, c in zip(rows, cols):
            if s + r < c:
                uf.union(s + r, c)
    groups = {}
    for i in range(keep.size):
        groups.setdefault(uf.find(i), []).append(i)
    volume = dist.cell_volume
    modes = []
    for members in groups.values():
        cells = keep[np.asarray(members)]
        local = dens[cells]
        center_cell = int(cells[int(np.argmax(local))])
        modes.append(Mode(
            center=grid.rotation(center_cell),
            mass=float(local.sum() * volume),
            member_cells=cells,
        ))
    modes.sort(key=lambda m: (-m.mass, int(m.member_cells.min())))
    return ModeSet(modes=modes)


def top_k_candidates(modes: ModeSet, k: int):
    """Centers of the k most massive modes (fewer when fewer modes exist)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [m.center for m in modes.modes[:k]]


def spike_distribution(grid: EquivolumetricGrid, rotations, masses=None) -> PoseDistribution:
    """Ideal distribution with point masses snapped to their nearest cells."""
    quats = as_quat_array(rotations)
    if masses is None:
        masses = np.full(quats.shape[0], 1.0 / quats.shape[0])
    masses = np.asarray(masses, dtype=np.float64)
    masses = masses / masses.sum()
    dens = np.zeros(len(grid))
    for q, m in zip(quats, masses):
        dens[nearest_cell(grid, q)] += m / grid.cell_volume
    return PoseDistribution(grid_level=grid.level, densities=dens)


def write_distribution(dist: PoseDistribution, path) -> None:
    """Dump: magic 'SO3D', u8 version=1, u8 grid_level, u64 N, N LE f32."""
    with open(path, "wb") as fh:
        fh.write(DIST_MAGIC)
        fh.write(struct.pack("<BB", 1, dist.grid_level))
        fh.write(struct.pack("<Q", dist.densities.shape[0]))
        fh.write(np.ascontiguousarray(dist.densities, dtype="<f4").tobytes())


def read_distribution(path) -> PoseDistribution:
    with open(path, "rb") as fh:
        data = fh.read()
    fh = io.BytesIO(data)
    magic = fh.read(4)
    if magic != DIST_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {DIST_MAGIC!r}")
    version, level = struct.unpack("<BB", fh.read(2))
    if version != 1:
        raise ValueError(f"{path}: unsupported distribution version {version}")
    (count,) = struct.unpack("<Q", fh.read(8))
    dens = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    if dens.shape[0] != count:
        raise ValueError(f"{path}: truncated payload")
    # f32 round-trip loses a little mass; renormalize to keep the invariant.
    dens = dens / (dens.sum() * HAAR_VOLUME / count)
    return PoseDistribution(grid_level=level, densities=dens)
