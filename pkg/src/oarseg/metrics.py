"""Segmentation evaluation: overlap measures and the symmetric 95% Hausdorff
distance over boundary points in millimeters.

Boundary points are the centers (index * spacing) of foreground voxels with
at least one 6-neighbor background voxel; the volume border counts as
background.  The directed distance uses the nearest-rank percentile: the
ceil(p*n)-th smallest (1-based) of the nearest-neighbor distances.  Empty
masks follow the reporting convention DSC 0 / 95HD infinity for a missed
structure; two empty masks compare as a perfect match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimsError, EmptySetError
from .grids import Mask, overlap_counts, require_same_dims


def dsc_ppv_sen(pred: Mask, gt: Mask) -> tuple[float, float, float]:
    """Dice overlap, positive predictive value, and sensitivity.

    Conventions: both empty -> (1, 1, 1); a ratio with a zero denominator
    against a nonempty counterpart -> 0.
    """
    n_inter, n_pred, n_gt = overlap_counts(pred, gt)
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    dsc = 2.0 * n_inter / (n_pred + n_gt)
    ppv = n_inter / n_pred if n_pred else 0.0
    sen = n_inter / n_gt if n_gt else 0.0
    return dsc, ppv, sen


def surface_points(m: Mask) -> np.ndarray:
    """(k, 3) array of boundary voxel centers in mm, lexicographic order."""
    padded = np.zeros(tuple(d + 2 for d in m.dims), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = m.data
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    boundary = m.data & ~interior
    idx = np.argwhere(boundary)
    return idx.astype(np.float64) * np.asarray(m.spacing)


def nn_distances_bruteforce(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """All-pairs nearest-neighbor distances from each point of x to y."""
    if len(x) == 0 or len(y) == 0:
        raise EmptySetError("point sets must be nonempty")
    d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def _nn_distances_kdtree(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dists, _ = cKDTree(y).query(x, k=1)
    return np.atleast_1d(dists)


def directed_hd_p(x: np.ndarray, y: np.ndarray, p: float = 0.95,
                  method: str = "kdtree") -> float:
    """p-th percentile (nearest rank) of nearest-neighbor distances x -> y."""
    if len(x) == 0 or len(y) == 0:
        raise EmptySetError("point sets must be nonempty")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"percentile must be in (0, 1], got {p}")
    if method == "kdtree":
        dists = _nn_distances_kdtree(x, y)
    elif method == "bruteforce":
        dists = nn_distances_bruteforce(x, y)
    else:
        raise ValueError(f"method must be 'kdtree' or 'bruteforce', got {method!r}")
    rank = math.ceil(p * len(dists))  # 1-based
    return float(np.partition(dists, rank - 1)[rank - 1])


def hd95(pred: Mask, gt: Mask, p: float = 0.95, method: str = "kdtree") -> float:
    """Symmetric 95% Hausdorff distance in mm.

    Mean of the two directed percentile distances between boundary point
    sets.  Either side empty -> +infinity, unless both masks are empty -> 0.
    """
    require_same_dims(pred, gt)
    if pred.spacing != gt.spacing:
        raise DimsError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    sp = surface_points(pred)
    sg = surface_points(gt)
    if len(sp) == 0 and len(sg) == 0:
        return 0.0
    if len(sp) == 0 or len(sg) == 0:
        return math.inf
    return (directed_hd_p(sp, sg, p, method) + directed_hd_p(sg, sp, p, method)) / 2.0


@dataclass
class MetricsRecord:
    """One evaluated (case, structure) pair."""

    case: str
    structure: str
    dsc: float
    hd95_mm: float
    ppv: float
    sen: float
    n_pred: int
    n_gt: int
    frame: str = "iso"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if math.isinf(d["hd95_mm"]):
            d["hd95_mm"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        if d.get("hd95_mm") == "inf":
            d["hd95_mm"] = math.inf
        return cls(**d)


def evaluate_pair(pred: Mask, gt: Mask, case: str = "", structure: str = "",
                  frame: str = "iso") -> MetricsRecord:
    dsc, ppv, sen = dsc_ppv_sen(pred, gt)
    return MetricsRecord(
        case=case,
        structure=structure,
        dsc=dsc,
        hd95_mm=hd95(pred, gt),
        ppv=ppv,
        sen=sen,
        n_pred=pred.count(),
        n_gt=gt.count(),
        frame=frame,
    )


@dataclass
class Summary:
    """Mean and standard deviation of each metric over a set of records."""

    structure: str
    n: int
    dsc_mean: float
    dsc_sd: float
    hd95_mean: float
    hd95_sd: float
    ppv_mean: float
    ppv_sd: float
    sen_mean: float
    sen_sd: float


def summarize(records: list[MetricsRecord]) -> list[Summary]:
    """Per-structure mean +/- SD, in first-seen structure order.

    Records with infinite 95HD propagate infinity into the mean.
    """
    by_structure: dict[str, list[MetricsRecord]] = {}
    for r in records:
        by_structure.setdefault(r.structure, []).append(r)
    out = []
    for structure, recs in by_structure.items():
        def stats(vals):
            arr = np.asarray(vals, dtype=np.float64)
            if np.isinf(arr).any():
                return math.inf, math.inf
            return float(arr.mean()), float(arr.std())
        dm, ds = stats([r.dsc for r in recs])
        hm, hs = stats([r.hd95_mm for r in recs])
        pm, ps = stats([r.ppv for r in recs])
        sm, ss = stats([r.sen for r in recs])
        out.append(Summary(structure, len(recs), dm, ds, hm, hs, pm, ps, sm, ss))
    return out
