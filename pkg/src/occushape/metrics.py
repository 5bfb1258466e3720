"""Point-set distances used for shape supervision and planning.

EMD solves the exact optimal assignment between equal-size sets. Chamfer
distance is the symmetric mean nearest-neighbor distance. The density-aware
variant (DCD) rescales each nearest-neighbor hit by how many points share
that neighbor, which keeps the value in [0, 1) and penalizes collapsed
predictions.

Nearest-neighbor queries switch to a uniform grid hash above 256 target
points. The hash path recomputes distances with the same arithmetic and the
same lowest-index tie rule as the naive path, so results are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .sampling import VoxelSet

NAIVE_LIMIT = 256


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class DcdParams:
    alpha: float
    lam: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise MetricsError(f"alpha must be positive, got {self.alpha}")
        if self.lam < 0:
            raise MetricsError(f"lambda must be non-negative, got {self.lam}")


DCD_TRAIN = DcdParams(alpha=20.0, lam=0.1)
DCD_EVAL = DcdParams(alpha=500.0, lam=0.5)


@dataclass(frozen=True)
class LossWeights:
    w_emd: float = 0.5
    w_dcd: float = 0.4
    w_cd: float = 0.1

    def __post_init__(self):
        if min(self.w_emd, self.w_dcd, self.w_cd) < 0:
            raise MetricsError("loss weights must be non-negative")


DEFAULT_WEIGHTS = LossWeights()


def _pts(x) -> np.ndarray:
    if isinstance(x, VoxelSet):
        arr = x.points
    else:
        arr = np.asarray(x, dtype=np.float64)
    arr = arr.reshape(-1, 3)
    if arr.shape[0] == 0:
        raise MetricsError("point set is empty")
    if not np.all(np.isfinite(arr)):
        raise MetricsError("point set has non-finite coordinates")
    return arr


def _row_dists(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    diff = q - pts
    return np.sqrt((diff * diff).sum(axis=-1))


def _dist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, 2_000_000 // max(b.shape[0], 1))
    for lo in range(0, a.shape[0], step):
        out[lo : lo + step] = _row_dists(a[lo : lo + step, None, :], b[None, :, :])
    return out


def _nearest_naive(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.empty(a.shape[0], dtype=np.int64)
    dist = np.empty(a.shape[0])
    step = max(1, 2_000_000 // max(b.shape[0], 1))
    for lo in range(0, a.shape[0], step):
        d = _row_dists(a[lo : lo + step, None, :], b[None, :, :])
        best = np.argmin(d, axis=1)
        idx[lo : lo + step] = best
        dist[lo : lo + step] = d[np.arange(d.shape[0]), best]
    return idx, dist


class _GridHash:
    """Uniform cell index over a fixed point set."""

    def __init__(self, pts: np.ndarray):
        self.pts = pts
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        extent = float((hi - lo).max())
        per_axis = max(1, int(round(pts.shape[0] ** (1.0 / 3.0))))
        self.h = extent / per_axis if extent > 0 else 1.0
        self.lo = lo
        cells = np.floor((pts - lo) / self.h).astype(np.int64)
        self.buckets: dict[tuple[int, int, int], list[int]] = {}
        for i, c in enumerate(map(tuple, cells)):
            self.buckets.setdefault(c, []).append(i)
        self.max_ring = int(cells.max()) + 2 if cells.size else 1

    def _shell(self, center: np.ndarray, r: int) -> list[int]:
        cx, cy, cz = (int(v) for v in center)
        out: list[int] = []
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) != r:
                        continue
                    got = self.buckets.get((cx + dx, cy + dy, cz + dz))
                    if got:
                        out.extend(got)
        return out

    def query(self, q: np.ndarray) -> tuple[int, float]:
        cell = np.floor((q - self.lo) / self.h).astype(np.int64)
        best_idx = -1
        best_d = np.inf
        r = 0
        while True:
            cand = self._shell(cell, r)
            if cand:
                cand = np.sort(np.asarray(cand, dtype=np.int64))
                d = _row_dists(q[None, :], self.pts[cand])
                j = int(np.argmin(d))
                if d[j] < best_d or (d[j] == best_d and int(cand[j]) < best_idx):
                    best_d = float(d[j])
                    best_idx = int(cand[j])
            r += 1
            # points in farther shells are at least (r - 1) cells away
            if best_idx >= 0 and (r - 1) * self.h > best_d:
                break
            if r > self.max_ring + int(np.abs(cell).max()) + 2:
                break
        return best_idx, best_d


def _nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if b.shape[0] <= NAIVE_LIMIT:
        return _nearest_naive(a, b)
    grid = _GridHash(b)
    idx = np.empty(a.shape[0], dtype=np.int64)
    dist = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        idx[i], dist[i] = grid.query(a[i])
    return idx, dist


def emd(a, b, mean: bool = False) -> float:
    """Exact earth mover's distance: min over bijections of the summed
    pairwise distances. ``mean=True`` divides by the set size."""
    pa, pb = _pts(a), _pts(b)
    if pa.shape[0] != pb.shape[0]:
        raise MetricsError(f"EMD needs equal sizes, got {pa.shape[0]} and {pb.shape[0]}")
    cost = _dist_matrix(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    return total / pa.shape[0] if mean else total


def chamfer(a, b) -> float:
    """Symmetric chamfer distance: mean NN distance in both directions, summed."""
    pa, pb = _pts(a), _pts(b)
    _, d_ab = _nearest(pa, pb)
    _, d_ba = _nearest(pb, pa)
    return float(d_ab.mean() + d_ba.mean())


def _dcd_one_way(src: np.ndarray, dst: np.ndarray, params: DcdParams) -> float:
    idx, dist = _nearest(src, dst)
    hits = np.bincount(idx, minlength=dst.shape[0]).astype(np.float64)
    n_hat = hits[idx]
    term = 1.0 - np.exp(-params.alpha * dist) / np.power(n_hat, params.lam)
    return float(term.mean())


def dcd(a, b, params: DcdParams = DCD_EVAL) -> float:
    """Density-aware chamfer distance, bounded in [0, 1)."""
    pa, pb = _pts(a), _pts(b)
    return 0.5 * (_dcd_one_way(pa, pb, params) + _dcd_one_way(pb, pa, params))


def loss_breakdown(current, goal, weights: LossWeights = DEFAULT_WEIGHTS, dcd_params: DcdParams = DCD_EVAL) -> dict[str, float]:
    e = emd(current, goal, mean=True)
    d = dcd(current, goal, dcd_params)
    c = chamfer(current, goal)
    total = weights.w_emd * e + weights.w_dcd * d + weights.w_cd * c
    return {"emd": e, "dcd": d, "cd": c, "total": total}


def total_loss(current, goal, weights: LossWeights = DEFAULT_WEIGHTS, dcd_params: DcdParams = DCD_EVAL) -> float:
    """Weighted shape loss: w1 * mean EMD + w2 * DCD + w3 * CD."""
    return loss_breakdown(current, goal, weights, dcd_params)["total"]
