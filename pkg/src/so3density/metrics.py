"""Evaluation metrics: average log-likelihood, spread, precision, top-k recall.

Log-likelihood reads the normalized density of the grid cell nearest each
annotation (histogram reading); spread is the expected geodesic distance
from the predicted distribution to the nearest member of the full
ground-truth orbit.  Precision compares single predictions to annotations;
top-k metrics score the best of k extracted mode centers.  Angles are
radians internally and degrees in reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .grid import EquivolumetricGrid, generate_grid
from .infer import ModeSet, PoseDistribution, top_k_candidates
from .rotation import Rotation, as_quat_array, quat_angles

__all__ = [
    "EvalRecord",
    "MissingFullGroundTruth",
    "average_log_likelihood",
    "per_record_log_likelihood",
    "spread",
    "precision_metrics",
    "topk_metrics",
    "build_report",
    "write_report",
    "write_per_record_csv",
]

_DENSITY_FLOOR = np.finfo(np.float64).tiny


class MissingFullGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    """One test example: predicted distribution, annotation, optional orbit."""

    distribution: PoseDistribution
    gt_annotated: Rotation
    gt_full: np.ndarray | None = None  # (K, 4) quaternions when known

    def __post_init__(self):
        if self.gt_full is not None:
            gap = float(np.min(quat_angles(self.gt_full, self.gt_annotated.quaternion)))
            if gap > 1e-6:
                raise ValueError("gt_full does not contain the annotation")


def _grid_for(records, grid):
    if grid is None:
        grid = generate_grid(records[0].distribution.grid_level)
    return grid


def per_record_log_likelihood(records, grid: EquivolumetricGrid | None = None):
    """Log density at the cell nearest each annotation.

    Returns (values, flagged) where flagged marks records whose density was
    floored at the smallest positive normal before the log.
    """
    grid = _grid_for(records, grid)
    gts = np.stack([r.gt_annotated.quaternion for r in records])
    nearest = np.argmax(np.abs(gts @ grid.quaternions.T), axis=1)
    dens = np.array([r.distribution.densities[c] for r, c in zip(records, nearest)])
    flagged = dens < _DENSITY_FLOOR
    return np.log(np.maximum(dens, _DENSITY_FLOOR)), flagged


def average_log_likelihood(records, grid: EquivolumetricGrid | None = None) -> float:
    """Mean log-likelihood of the annotations under the predicted distributions."""
    values, _ = per_record_log_likelihood(records, grid)
    return float(values.mean())


def _min_distance_to_orbit(grid, orbit_quats):
    """(N,) geodesic distance from each grid cell to the nearest orbit member."""
    dots = np.abs(grid.quaternions @ np.asarray(orbit_quats, dtype=np.float64).T)
    return 2.0 * np.arccos(np.clip(dots.max(axis=1), 0.0, 1.0))


def spread(records, grid: EquivolumetricGrid | None = None) -> float:
    """Expected angular deviation to the nearest ground truth, radians.

    Requires every record to carry the full equivalent ground-truth set.
    """
    grid = _grid_for(records, grid)
    volume = grid.cell_volume
    total = 0.0
    for rec in records:
        if rec.gt_full is None:
            raise MissingFullGroundTruth("spread needs the full ground-truth orbit")
        dists = _min_distance_to_orbit(grid, rec.gt_full)
        total += float(np.sum(rec.distribution.densities * volume * dists))
    return total / len(records)


def _prediction_errors(predictions, records):
    errs = np.empty(len(records))
    for i, (pred, rec) in enumerate(zip(predictions, records)):
        pq = pred.quaternion if isinstance(pred, Rotation) else np.asarray(pred)
        if rec.gt_full is not None:
            errs[i] = float(np.min(quat_angles(rec.gt_full, pq)))
        else:
            errs[i] = float(quat_angles(rec.gt_annotated.quaternion, pq))
    return errs


def precision_metrics(predictions, records, thresholds_deg=(15.0, 30.0)):
    """Median angular error (degrees) and accuracy at each threshold (strict <)."""
    errs = np.degrees(_prediction_errors(predictions, records))
    return {
        "median_error_deg": float(np.median(errs)),
        "acc_at": {float(t): float(np.mean(errs < t)) for t in thresholds_deg},
        "errors_deg": errs,
    }


def topk_metrics(mode_sets, records, grid: EquivolumetricGrid | None = None,
                 k: int = 1, thresholds_deg=(15.0, 30.0)):
    """Recall-style metrics over the k most massive mode centers.

    Per record the error is the minimum over candidates of the distance to
    the annotation; the spread term renormalizes each candidate mode's
    member-cell masses to 1 and takes the best (smallest) expectation.
    """
    grid = _grid_for(records, grid)
    volume = grid.cell_volume
    errs = np.empty(len(records))
    spreads = np.empty(len(records))
    for i, (modes, rec) in enumerate(zip(mode_sets, records)):
        assert isinstance(modes, ModeSet) and len(modes) > 0
        gt = rec.gt_annotated.quaternion
        centers = as_quat_array(top_k_candidates(modes, k))
        errs[i] = float(np.min(quat_angles(centers, gt)))
        best = math.inf
        for mode in modes.modes[:k]:
            cells = mode.member_cells
            masses = rec.distribution.densities[cells] * volume
            w = masses / masses.sum()
            d = quat_angles(grid.quaternions[cells], gt)
            best = min(best, float(np.sum(w * d)))
        spreads[i] = best
    errs_deg = np.degrees(errs)
    return {
        "topk_acc": {float(t): float(np.mean(errs_deg < t)) for t in thresholds_deg},
        "topk_error_median_deg": float(np.median(errs_deg)),
        "topk_spread_deg": float(np.degrees(spreads.mean())),
        "errors_deg": errs_deg,
    }


def build_report(records, grid=None, predictions=None, mode_sets=None,
                 topk=(), thresholds_deg=(15.0, 30.0)):
    """Assemble the JSON-ready evaluation report; parts without inputs are null."""
    grid = _grid_for(records, grid)
    report = {
        "avg_log_likelihood": average_log_likelihood(records, grid),
        "spread_deg": None,
        "median_error_deg": None,
        "acc15": None,
        "acc30": None,
        "topk": {},
    }
    if all(r.gt_full is not None for r in records):
        report["spread_deg"] = math.degrees(spread(records, grid))
    errors = None
    if predictions is not None:
        prec = precision_metrics(predictions, records, thresholds_deg)
        errors = prec["errors_deg"]
        report["median_error_deg"] = prec["median_error_deg"]
        report["acc15"] = prec["acc_at"].get(15.0)
        report["acc30"] = prec["acc_at"].get(30.0)
    if mode_sets is not None:
        for k in topk:
            tk = topk_metrics(mode_sets, records, grid, k=k, thresholds_deg=thresholds_deg)
            report["topk"][str(k)] = {
                "acc": {str(t): v for t, v in tk["topk_acc"].items()},
                "error_median_deg": tk["topk_error_median_deg"],
                "spread_deg": tk["topk_spread_deg"],
            }
    return report, errors


def write_report(path, report) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_record_csv(path, errors_deg) -> None:
    with open(path, "w") as fh:
        fh.write("record,error_deg\n")
        for i, e in enumerate(errors_deg):
            fh.write(f"{i},{e:.6f}\n")
