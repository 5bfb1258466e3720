"""Sparse voxel-center point sets and farthest point down-sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .occupancy import CLASS_COLORS, OccupancyGrid, SemanticClass

DEFAULT_K = 300


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelSet:
    """Point set in meters with per-point RGB color and semantic class."""

    points: np.ndarray
    colors: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = pts.shape[0]
        colors = np.asarray(self.colors, dtype=np.uint8).reshape(n, 3)
        classes = np.asarray(self.classes, dtype=np.uint8).reshape(n)
        pts.setflags(write=False)
        colors.setflags(write=False)
        classes.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_points(cls, points, klass: SemanticClass = SemanticClass.PLASTICINE, colors=None) -> "VoxelSet":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = pts.shape[0]
        if colors is None:
            colors = np.tile(np.asarray(CLASS_COLORS[klass], dtype=np.uint8), (n, 1))
        return cls(pts, colors, np.full(n, int(klass), dtype=np.uint8))

    @classmethod
    def from_grid(cls, grid: OccupancyGrid, class_filter: SemanticClass | None = None) -> "VoxelSet":
        """Occupied voxel centers, ordered by x-fastest linear index."""
        mask = grid.occupied_mask() if class_filter is None else grid.class_mask(class_filter)
        idx = np.argwhere(mask.transpose(2, 1, 0))[:, ::-1]
        pts = grid.spec.center(idx)
        colors = grid.color[idx[:, 0], idx[:, 1], idx[:, 2]]
        classes = grid.klass[idx[:, 0], idx[:, 1], idx[:, 2]]
        return cls(pts, colors, classes)

    def subset(self, indices) -> "VoxelSet":
        idx = np.asarray(indices, dtype=np.int64)
        return VoxelSet(self.points[idx], self.colors[idx], self.classes[idx])

    def with_points(self, points) -> "VoxelSet":
        return VoxelSet(points, self.colors, self.classes)


def _fps_candidates(source, class_filter):
    if isinstance(source, OccupancyGrid):
        return VoxelSet.from_grid(source, class_filter)
    if isinstance(source, VoxelSet):
        if class_filter is None:
            return source
        keep = np.flatnonzero(source.classes == int(class_filter))
        return source.subset(keep)
    return VoxelSet.from_points(np.asarray(source, dtype=np.float64))


def fps_indices(points: np.ndarray, k: int, seed_rule="centroid") -> tuple[np.ndarray, np.ndarray]:
    """Greedy max-min selection. Returns (indices, selection radii).

    The i-th radius is the min distance of the i-th pick to the previously
    selected set (inf for the seed); radii are non-increasing. Ties in the
    arg-max break toward the lowest candidate index.
    """
    n = points.shape[0]
    if not 1 <= k <= n:
        raise SamplingError(f"k={k} outside [1, {n}]")

    if seed_rule == "centroid":
        centroid = points.mean(axis=0)
        seed = int(np.argmin(np.linalg.norm(points - centroid, axis=1)))
    elif seed_rule == "first":
        seed = 0
    elif isinstance(seed_rule, (int, np.integer)):
        seed = int(seed_rule)
        if not 0 <= seed < n:
            raise SamplingError(f"seed index {seed} outside [0, {n})")
    else:
        raise SamplingError(f"unknown seed rule {seed_rule!r}")

    chosen = np.empty(k, dtype=np.int64)
    radii = np.empty(k, dtype=np.float64)
    chosen[0] = seed
    radii[0] = np.inf
    min_dist = np.linalg.norm(points - points[seed], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))
        chosen[i] = nxt
        radii[i] = min_dist[nxt]
        np.minimum(min_dist, np.linalg.norm(points - points[nxt], axis=1), out=min_dist)
    return chosen, radii


def fps_downsample(source, k: int = DEFAULT_K, class_filter: SemanticClass | None = SemanticClass.PLASTICINE, seed_rule="centroid") -> VoxelSet:
    """Down-sample a grid, VoxelSet or raw point array to k points.

    Candidates keep their source order (x-fastest linear index for grids),
    which fixes all tie-breaking. Deterministic; no RNG involved.
    """
    cand = _fps_candidates(source, class_filter)
    if len(cand) == 0:
        raise SamplingError("no candidate points after class filtering")
    idx, _ = fps_indices(cand.points, k, seed_rule)
    return cand.subset(idx)


CSV_HEADER = ["x", "y", "z", "r", "g", "b"]


def write_voxelset_csv(path, vs: VoxelSet) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for p, c in zip(vs.points, vs.colors):
            writer.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", c[0], c[1], c[2]])


def read_voxelset_csv(path, klass: SemanticClass = SemanticClass.PLASTICINE) -> VoxelSet:
    """Read x,y,z[,r,g,b] rows. Header row is required."""
    with open(path, "r", newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SamplingError(f"{path}: empty CSV")
    header = [h.strip().lower() for h in rows[0]]
    if header[:3] != ["x", "y", "z"]:
        raise SamplingError(f"{path}: expected x,y,z header, got {rows[0]!r}")
    has_rgb = header[:6] == CSV_HEADER
    pts = []
    cols = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            pts.append([float(row[0]), float(row[1]), float(row[2])])
            if has_rgb:
                cols.append([int(row[3]), int(row[4]), int(row[5])])
        except (ValueError, IndexError) as exc:
            raise SamplingError(f"{path}: bad row {ln}: {row!r}") from exc
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if has_rgb:
        return VoxelSet(pts, np.asarray(cols, dtype=np.uint8), np.full(len(pts), int(klass), dtype=np.uint8))
    return VoxelSet.from_points(pts, klass)
