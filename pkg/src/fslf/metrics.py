"""Overlap and boundary-distance scores between binary masks (voxel units)."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataError, ShapeError
from .volume import as_array

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class MetricReport:
    method: str
    structure: int
    iteration: int
    dice: float
    hausdorff: float


def _pair(a, b):
    a = as_array(a).astype(bool)
    b = as_array(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """``2|A&B| / (|A|+|B|)``; 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour.

    Voxels outside the volume count as background.
    """
    mask = np.asarray(as_array(mask), dtype=bool)
    structure = _SIX if mask.ndim == 3 else ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure, border_value=0)
    return mask & ~eroded


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between the boundary voxel sets."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise DataError("Hausdorff distance is undefined for an empty mask")
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def report(method: str, structure: int, iteration: int, pred, truth) -> MetricReport:
    pred = as_array(pred) == structure
    truth = as_array(truth) == structure
    hd = hausdorff(pred, truth) if pred.any() and truth.any() else float("inf")
    return MetricReport(method, int(structure), int(iteration), dice(pred, truth), hd)


def write_reports(path, reports) -> None:
    fields = ["method", "structure", "iteration", "dice", "hausdorff"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in reports:
            writer.writerow(asdict(r))
