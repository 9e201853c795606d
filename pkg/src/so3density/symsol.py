"""Synthetic symmetric-solid tasks with analytic ground truth.

Descriptors are exact symmetry invariants of the pose (a canonical coset
representative for the platonic solids, the symmetry axis for the cone,
the axis outer product for the flip-symmetric cylinder, and a visibility-
gated frame for the marked sphere).  Because the descriptor determines the
pose exactly up to the symmetry group, the ideal conditional distribution
over rotations is known in closed form for every record.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .rotation import (
    Rotation,
    canonicalize_quats,
    quat_angles,
    quat_multiply,
    quats_to_matrices,
)

__all__ = [
    "SymmetryGroup",
    "DatasetRecord",
    "DISCRETE_KINDS",
    "CONTINUOUS_KINDS",
    "ALL_KINDS",
    "GROUP_ORDERS",
    "SPHEREX_HIDDEN_IDEAL_LL",
    "build_group",
    "orbit",
    "make_descriptor",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "marker_visible",
]

DISCRETE_KINDS = ("tetrahedron", "cube", "icosahedron")
CONTINUOUS_KINDS = ("cone", "cylinder")
ALL_KINDS = DISCRETE_KINDS + CONTINUOUS_KINDS + ("sphereX",)

GROUP_ORDERS = {"tetrahedron": 12, "cube": 24, "icosahedron": 60}

# Uniform density over the half of SO(3) where the marker is hidden.
SPHEREX_HIDDEN_IDEAL_LL = math.log(2.0) - 2.0 * math.log(math.pi)

DEFAULT_DESCRIPTOR_DIM = 16
DEFAULT_ORBIT_SAMPLES = 360

_DIAGONAL = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTEX = np.array([0.0, 1.0, _PHI]) / math.sqrt(1.0 + _PHI ** 2)

_GENERATORS = {
    "tetrahedron": [((0.0, 0.0, 1.0), math.pi), (_DIAGONAL, 2.0 * math.pi / 3.0)],
    "cube": [((0.0, 0.0, 1.0), math.pi / 2.0), (_DIAGONAL, 2.0 * math.pi / 3.0)],
    "icosahedron": [(_ICO_VERTEX, 2.0 * math.pi / 5.0), (_DIAGONAL, 2.0 * math.pi / 3.0)],
}

# Stable per-kind seeds for the fixed descriptor projections.
_PROJECTION_SEEDS = {"tetrahedron": 1101, "cube": 1102, "icosahedron": 1103, "sphereX": 1106}

_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class SymmetryGroup:
    """Finite rotation group (discrete kinds) or parametric symmetry (continuous).

    elements is a (K, 4) canonical quaternion array for discrete kinds and
    None for cone/cylinder, whose orbits are circles sampled on demand.
    """

    kind: str
    elements: np.ndarray | None
    orbit_samples: int = DEFAULT_ORBIT_SAMPLES

    @property
    def order(self):
        return None if self.elements is None else self.elements.shape[0]


def _close_under_composition(generators):
    """Brute-force closure of a quaternion set to a fixed point."""
    elems = [np.array([1.0, 0.0, 0.0, 0.0])]
    queue = list(generators)
    while queue:
        cand = canonicalize_quats(queue.pop())
        known = np.stack(elems)
        if np.min(quat_angles(known, cand)) < _MATCH_TOL:
            continue
        elems.append(cand)
        for e in list(elems):
            queue.append(quat_multiply(e, cand))
            queue.append(quat_multiply(cand, e))
    out = np.stack(elems)
    # Deterministic element order.
    order = np.lexsort((out[:, 3], out[:, 2], out[:, 1], out[:, 0]))
    return out[order]


def build_group(kind: str) -> SymmetryGroup:
    """Construct the symmetry group for a solid kind."""
    if kind in DISCRETE_KINDS:
        gens = [
            Rotation.from_axis_angle(axis, angle).quaternion
            for axis, angle in _GENERATORS[kind]
        ]
        elements = _close_under_composition(gens)
        if elements.shape[0] != GROUP_ORDERS[kind]:
            raise RuntimeError(
                f"{kind} closure produced {elements.shape[0]} elements, "
                f"expected {GROUP_ORDERS[kind]}"
            )
        return SymmetryGroup(kind=kind, elements=elements)
    if kind in CONTINUOUS_KINDS or kind == "sphereX":
        return SymmetryGroup(kind=kind, elements=None)
    raise ValueError(f"unknown solid kind {kind!r}")


def _dedup_quats(q, tol=_MATCH_TOL):
    keep = []
    for i in range(q.shape[0]):
        if not keep or np.min(quat_angles(np.stack([q[k] for k in keep]), q[i])) > tol:
            keep.append(i)
    return q[keep]


def orbit(gt: Rotation, group: SymmetryGroup, samples: int | None = None):
    """(K, 4) canonical quaternions equivalent to gt under the symmetry.

    Discrete kinds return {gt*g}; the cone returns a sampled circle
    {gt*Rz(psi)}; the cylinder adds the flipped circle {gt*Rx(pi)*Rz(psi)}.
    """
    if group.elements is not None:
        return _dedup_quats(canonicalize_quats(quat_multiply(gt.quaternion, group.elements)))
    if group.kind == "sphereX":
        if marker_visible(gt):
            return gt.quaternion.reshape(1, 4)
        raise ValueError(
            "hidden-marker equivalence class is a half-space, not an orbit curve"
        )
    s = samples or group.orbit_samples
    psi = np.arange(s) * (2.0 * math.pi / s)
    half = psi / 2.0
    spins = np.zeros((s, 4))
    spins[:, 0] = np.cos(half)
    spins[:, 3] = np.sin(half)
    circle = quat_multiply(gt.quaternion, spins)
    if group.kind == "cone":
        return canonicalize_quats(circle)
    flip = quat_multiply(gt.quaternion, Rotation.rot_x(math.pi).quaternion)
    flipped = quat_multiply(flip, spins)
    return canonicalize_quats(np.concatenate([circle, flipped], axis=0))


def _projection(kind: str, in_dim: int, out_dim: int):
    rng = np.random.default_rng(_PROJECTION_SEEDS[kind])
    return rng.standard_normal((out_dim, in_dim)) / math.sqrt(in_dim)


def _coset_representative(gt: Rotation, group: SymmetryGroup):
    """Lexicographically smallest flattened matrix over the orbit."""
    members = canonicalize_quats(quat_multiply(gt.quaternion, group.elements))
    flat = quats_to_matrices(members).reshape(-1, 9)
    order = np.lexsort(tuple(flat[:, k] for k in range(8, -1, -1)))
    return flat[order[0]]


def marker_visible(gt: Rotation) -> bool:
    """True when the marked point of the sphere (along e_x) faces upward."""
    return float(gt.matrix[2, 0]) > 0.0


def make_descriptor(gt: Rotation, kind: str, noise_sigma: float = 0.0,
                    dim: int = DEFAULT_DESCRIPTOR_DIM, rng=None, group=None):
    """Deterministic symmetry-invariant descriptor of the pose, plus noise.

    The clean part is exactly invariant under the solid's symmetry; noise
    (when noise_sigma > 0) is drawn from rng, which must then be provided.
    """
    mat = gt.matrix
    if kind in DISCRETE_KINDS:
        group = group or _group_cached(kind)
        clean = _projection(kind, 9, dim) @ _coset_representative(gt, group)
    elif kind == "cone":
        clean = np.zeros(dim)
        clean[:3] = mat[:, 2]  # symmetry axis gt*e_z
    elif kind == "cylinder":
        a = mat[:, 2]
        clean = np.zeros(dim)
        clean[:9] = np.outer(a, a).reshape(9)  # flip-invariant
    elif kind == "sphereX":
        feats = np.zeros(7)
        if marker_visible(gt):
            feats[0] = 1.0
            feats[1:4] = mat[:, 0]  # gt*e_x
            feats[4:7] = mat[:, 1]  # gt*e_y
        clean = _projection("sphereX", 7, dim) @ feats
    else:
        raise ValueError(f"unknown solid kind {kind!r}")
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        clean = clean + noise_sigma * rng.standard_normal(dim)
    return clean


_GROUPS: dict[str, SymmetryGroup] = {}


def _group_cached(kind: str) -> SymmetryGroup:
    if kind not in _GROUPS:
        _GROUPS[kind] = build_group(kind)
    return _GROUPS[kind]


@dataclass(frozen=True)
class DatasetRecord:
    descriptor: np.ndarray
    gt_rotation: Rotation
    group_kind: str


def generate_dataset(kind: str, n: int, noise_sigma: float = 0.0, seed: int = 0,
                     dim: int = DEFAULT_DESCRIPTOR_DIM):
    """n records with Haar-uniform poses; rng per record is (seed, index)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown solid kind {kind!r}")
    group = _group_cached(kind) if kind in DISCRETE_KINDS else None
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        q = rng.standard_normal(4)
        gt = Rotation(q)
        desc = make_descriptor(gt, kind, noise_sigma, dim=dim, rng=rng, group=group)
        records.append(DatasetRecord(descriptor=desc, gt_rotation=gt, group_kind=kind))
    return records


def write_dataset(records, path) -> None:
    """JSON lines, one record per line: {"d": [...], "q": [w,x,y,z], "kind": ...}."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "d": [float(np.float32(v)) for v in rec.descriptor],
                "q": [float(v) for v in rec.gt_rotation.quaternion],
                "kind": rec.group_kind,
            }) + "\n")


def read_dataset(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(DatasetRecord(
                descriptor=np.asarray(obj["d"], dtype=np.float64),
                gt_rotation=Rotation(obj["q"]),
                group_kind=obj["kind"],
            ))
    return records
