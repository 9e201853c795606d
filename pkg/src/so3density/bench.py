"""Timing harness for full-distribution inference at several grid levels.

A session precomputes the grid's query features once (they are fixed across
frames), so per-frame work is the descriptor block, the broadcast sum, and
the remaining layers.  Timings are the median over repetitions with one
warmup discarded; absolute rates are machine-dependent, only ratios are
asserted anywhere.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .grid import generate_grid
from .infer import PoseDistribution
from .model import encode_queries
from .rotation import quats_to_matrices

__all__ = ["InferenceSession", "time_inference", "write_bench_csv"]

HAAR_VOLUME = math.pi ** 2
_CHUNK = 16384


class InferenceSession:
    """Model + grid with the query-side first layer cached for reuse."""

    def __init__(self, model, grid, dtype=np.float64):
        self.model = model
        self.grid = grid
        self.dtype = dtype
        mats = quats_to_matrices(grid.quaternions).reshape(-1, 9)
        enc = encode_queries(mats, model.config.pe_frequencies,
                             model.config.include_raw_entries).astype(dtype)
        self.t_query = enc @ model.w_query.T.astype(dtype)

    def scores(self, descriptor):
        m = self.model
        dtype = self.dtype
        d = np.asarray(descriptor, dtype=dtype).reshape(-1)
        t_desc = m.w_desc.astype(dtype) @ d
        bias = m.b_in.astype(dtype)
        n = self.t_query.shape[0]
        out = np.empty(n)
        for s in range(0, n, _CHUNK):
            pre1 = self.t_query[s : s + _CHUNK] + (t_desc + bias)
            out[s : s + pre1.shape[0]] = model_mod._run_layers(m, pre1, dtype)
        return out

    def distribution(self, descriptor) -> PoseDistribution:
        f = self.scores(descriptor)
        e = np.exp(f - f.max())
        dens = e / e.sum() * (f.shape[0] / HAAR_VOLUME)
        return PoseDistribution(grid_level=self.grid.level, densities=dens)


@dataclass(frozen=True)
class BenchResult:
    level: int
    cells: int
    timings: list
    median_seconds: float
    frames_per_second: float
    cells_per_second: float


def time_inference(model, grid_level: int, repetitions: int = 5,
                   dtype=np.float64, descriptor=None) -> BenchResult:
    """Median per-frame wall clock for one full distribution at a grid level."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    grid = generate_grid(grid_level)
    session = InferenceSession(model, grid, dtype=dtype)
    if descriptor is None:
        descriptor = np.zeros(model.config.descriptor_dim)
    session.distribution(descriptor)  # warmup, discarded
    timings = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        session.distribution(descriptor)
        timings.append(time.perf_counter() - t0)
    med = float(np.median(timings))
    return BenchResult(
        level=grid_level,
        cells=len(grid),
        timings=timings,
        median_seconds=med,
        frames_per_second=1.0 / med,
        cells_per_second=len(grid) / med,
    )


def write_bench_csv(path, results) -> None:
    with open(path, "w") as fh:
        fh.write("level,cells,median_seconds,fps\n")
        for r in results:
            fh.write(f"{r.level},{r.cells},{r.median_seconds:.6f},{r.frames_per_second:.4f}\n")
