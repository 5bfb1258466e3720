"""Dense semantic occupancy grids over an axis-aligned voxel lattice.

A grid stores per voxel an occupancy probability, a semantic class and an
RGB color. Grids are immutable; every operation returns a new grid. Class
precedence is positional: later labeling passes overwrite earlier ones, so
compose plane first, then objects.

Binary dump format (OCCV1, little endian):
  magic "OCCV" | u8 version=1 | u32 L,W,H | f32 sx,sy,sz | f32 ox,oy,oz
followed by L*W*H records of (u8 class, f32 prob, u8 r, u8 g, u8 b) in
x-fastest order. Header is 41 bytes, records 8 bytes each.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .meshes import TriMesh, raycast_axis, signed_distance

MAGIC = b"OCCV"
VERSION = 1
HEADER_SIZE = 41
RECORD_DTYPE = np.dtype([("klass", "u1"), ("prob", "<f4"), ("rgb", "u1", (3,))])
DEFAULT_THETA = 0.5


class SemanticClass(IntEnum):
    EMPTY = 0
    PLASTICINE = 1
    FINGER_A = 2
    FINGER_B = 3
    PLANE = 4
    NOISE = 5


CLASS_COLORS = {
    SemanticClass.EMPTY: (0, 0, 0),
    SemanticClass.PLASTICINE: (235, 190, 60),
    SemanticClass.FINGER_A: (125, 125, 125),
    SemanticClass.FINGER_B: (155, 155, 155),
    SemanticClass.PLANE: (40, 60, 130),
    SemanticClass.NOISE: (255, 0, 255),
}


class OccupancyError(ValueError):
    pass


class OccupancyFormatError(OccupancyError):
    """Malformed OCCV1 payload; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GridSpec:
    """Lattice geometry: integer dims plus float32 voxel size and origin.

    Sizes and origin are kept in float32 so a grid survives a dump round
    trip bit for bit; center coordinates are computed in float64 from the
    stored values.
    """

    dims: tuple[int, int, int]
    voxel_size: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise OccupancyError(f"dims must be three positive ints, got {self.dims}")
        vs = np.broadcast_to(np.asarray(self.voxel_size, dtype=np.float32), (3,)).copy()
        if np.any(vs <= 0):
            raise OccupancyError("voxel_size must be positive")
        org = np.broadcast_to(np.asarray(self.origin, dtype=np.float32), (3,)).copy()
        vs.setflags(write=False)
        org.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def center(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        return self.origin.astype(np.float64) + (idx + 0.5) * self.voxel_size.astype(np.float64)

    def centers(self) -> np.ndarray:
        """All voxel centers as an (L, W, H, 3) float64 array."""
        L, W, H = self.dims
        ii, jj, kk = np.meshgrid(np.arange(L), np.arange(W), np.arange(H), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.origin.astype(np.float64) + (idx + 0.5) * self.voxel_size.astype(np.float64)

    def world_to_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        rel = (pts - self.origin.astype(np.float64)) / self.voxel_size.astype(np.float64)
        return np.floor(rel).astype(np.int64)

    def index_in_bounds(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        dims = np.asarray(self.dims)
        return np.all((idx >= 0) & (idx < dims), axis=-1)

    def linear_index(self, idx) -> np.ndarray:
        """x-fastest linear index i + L*(j + W*k)."""
        idx = np.asarray(idx)
        L, W, _ = self.dims
        return idx[..., 0] + L * (idx[..., 1] + W * idx[..., 2])


@dataclass(frozen=True)
class OccupancyGrid:
    spec: GridSpec
    prob: np.ndarray
    klass: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        L, W, H = self.spec.dims
        prob = np.asarray(self.prob, dtype=np.float32)
        klass = np.asarray(self.klass, dtype=np.uint8)
        color = np.asarray(self.color, dtype=np.uint8)
        if prob.shape != (L, W, H) or klass.shape != (L, W, H) or color.shape != (L, W, H, 3):
            raise OccupancyError("field shapes disagree with spec dims")
        if np.any((prob < 0.0) | (prob > 1.0)):
            raise OccupancyError("prob outside [0, 1]")
        for arr, name in ((prob, "prob"), (klass, "klass"), (color, "color")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, spec: GridSpec) -> "OccupancyGrid":
        L, W, H = spec.dims
        return cls(
            spec,
            np.zeros((L, W, H), dtype=np.float32),
            np.zeros((L, W, H), dtype=np.uint8),
            np.zeros((L, W, H, 3), dtype=np.uint8),
        )

    def occupied_mask(self) -> np.ndarray:
        return self.klass != SemanticClass.EMPTY

    def class_mask(self, klass: SemanticClass) -> np.ndarray:
        return self.klass == int(klass)

    def replace_fields(self, prob=None, klass=None, color=None) -> "OccupancyGrid":
        return OccupancyGrid(
            self.spec,
            self.prob.copy() if prob is None else prob,
            self.klass.copy() if klass is None else klass,
            self.color.copy() if color is None else color,
        )


def overlay(base: OccupancyGrid, top: OccupancyGrid) -> OccupancyGrid:
    """Occupied voxels of ``top`` overwrite ``base``; empties pass through."""
    if base.spec != top.spec:
        raise OccupancyError("overlay requires identical grid specs")
    mask = top.occupied_mask()
    prob = np.where(mask, top.prob, base.prob)
    klass = np.where(mask, top.klass, base.klass)
    color = np.where(mask[..., None], top.color, base.color)
    return OccupancyGrid(base.spec, prob, klass, color)


def _masked_grid(spec: GridSpec, mask: np.ndarray, label: SemanticClass, color=None) -> OccupancyGrid:
    L, W, H = spec.dims
    rgb = CLASS_COLORS[label] if color is None else tuple(color)
    prob = np.where(mask, np.float32(1.0), np.float32(0.0)).astype(np.float32)
    klass = np.where(mask, np.uint8(int(label)), np.uint8(0))
    col = np.zeros((L, W, H, 3), dtype=np.uint8)
    col[mask] = np.asarray(rgb, dtype=np.uint8)
    return OccupancyGrid(spec, prob, klass, col)


def voxelize_mesh(mesh: TriMesh, spec: GridSpec, label: SemanticClass, color=None) -> OccupancyGrid:
    """Occupancy from a watertight mesh: occupied iff the signed distance of
    the voxel center is <= 0. Probability 1 on occupied voxels."""
    if label == SemanticClass.EMPTY:
        raise OccupancyError("cannot voxelize with the Empty label")
    L, W, H = spec.dims
    centers = spec.centers().reshape(-1, 3)
    lo, hi = mesh.bounds()
    pad = float(np.max(spec.voxel_size)) * 1e-6 + 1e-12
    cand = np.all((centers >= lo - pad) & (centers <= hi + pad), axis=1)
    mask = np.zeros(centers.shape[0], dtype=bool)
    if np.any(cand):
        sd = signed_distance(mesh, centers[cand])
        mask[cand] = sd <= 0.0
    return _masked_grid(spec, mask.reshape(L, W, H), label, color)


def voxelize_particles(points, radius: float, spec: GridSpec, label: SemanticClass, color=None) -> OccupancyGrid:
    """Occupied where the voxel center lies within a Chebyshev ``radius``
    of at least one particle (union of axis-aligned cubes)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    L, W, H = spec.dims
    mask = np.zeros((L, W, H), dtype=bool)
    if pts.size == 0:
        return _masked_grid(spec, mask, label, color)
    vs = spec.voxel_size.astype(np.float64)
    reach = np.ceil(radius / vs).astype(int)
    offs = np.stack(
        np.meshgrid(
            np.arange(-reach[0], reach[0] + 1),
            np.arange(-reach[1], reach[1] + 1),
            np.arange(-reach[2], reach[2] + 1),
            indexing="ij",
        ),
        axis=-1,
    ).reshape(-1, 3)
    base = spec.world_to_index(pts)
    idx = (base[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    ok = spec.index_in_bounds(idx)
    idx = idx[ok]
    centers = spec.center(idx)
    near = np.max(np.abs(centers - np.repeat(pts, offs.shape[0], axis=0)[ok]), axis=1) <= radius
    idx = idx[near]
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return _masked_grid(spec, mask, label, color)


def voxelize_capsule(segment_a, segment_b, radius: float, spec: GridSpec, label: SemanticClass, color=None) -> OccupancyGrid:
    """Occupied where the voxel center lies within ``radius`` of the axis
    segment (a capsule containment test)."""
    a = np.asarray(segment_a, dtype=np.float64)
    b = np.asarray(segment_b, dtype=np.float64)
    L, W, H = spec.dims
    centers = spec.centers().reshape(-1, 3)
    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    cand = np.all((centers >= lo) & (centers <= hi), axis=1)
    mask = np.zeros(centers.shape[0], dtype=bool)
    if np.any(cand):
        mask[cand] = point_segment_distance(centers[cand], a, b) <= radius
    return _masked_grid(spec, mask.reshape(L, W, H), label, color)


def point_segment_distance(points, a, b) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=1)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(pts - closest, axis=1)


def label_plane(grid: OccupancyGrid, plane_size, plane_height: float = 0.0, center=(0.0, 0.0)) -> OccupancyGrid:
    """Stamp the operating plane as a single voxel layer.

    The layer is the one whose top face sits at ``plane_height`` (clamped
    into the lattice when the plane coincides with the grid floor). Extent
    in x/y is bounded by plane_size[0] and plane_size[1] about ``center``.
    Existing voxels in the layer are overwritten; label objects afterwards
    so they win on contact.
    """
    l, w = float(plane_size[0]), float(plane_size[1])
    if l <= 0 or w <= 0:
        raise OccupancyError("plane extent must be positive")
    spec = grid.spec
    sz = float(spec.voxel_size[2])
    k = int(round((plane_height - float(spec.origin[2])) / sz)) - 1
    k = min(max(k, 0), spec.dims[2] - 1)

    L, W, _ = spec.dims
    ii, jj = np.meshgrid(np.arange(L), np.arange(W), indexing="ij")
    cx = spec.origin.astype(np.float64)[0] + (ii + 0.5) * float(spec.voxel_size[0])
    cy = spec.origin.astype(np.float64)[1] + (jj + 0.5) * float(spec.voxel_size[1])
    inside = (np.abs(cx - center[0]) <= l / 2.0) & (np.abs(cy - center[1]) <= w / 2.0)

    prob = grid.prob.copy()
    klass = grid.klass.copy()
    color = grid.color.copy()
    prob[:, :, k][inside] = 1.0
    klass[:, :, k][inside] = int(SemanticClass.PLANE)
    color[:, :, k][inside] = np.asarray(CLASS_COLORS[SemanticClass.PLANE], dtype=np.uint8)
    return OccupancyGrid(spec, prob, klass, color)


_AXIS_DIRS = (
    (1.0, 0.0, 0.0),
    (-1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, -1.0, 0.0),
    (0.0, 0.0, 1.0),
    (0.0, 0.0, -1.0),
)


def assign_colors(grid: OccupancyGrid, mesh: TriMesh, only_class: SemanticClass | None = None, return_misses: bool = False):
    """Color occupied voxels from the mesh surface.

    Each voxel center is cast along the six axis directions; the color is
    the mean of the RGB values interpolated at the hit points. Directions
    that miss are excluded; a voxel with no hit at all keeps its class
    default color and is reported in the miss list.
    """
    mask = grid.occupied_mask() if only_class is None else grid.class_mask(only_class)
    idx = np.argwhere(mask)
    color = grid.color.copy()
    misses: list[tuple[int, int, int]] = []
    if idx.size:
        centers = grid.spec.center(idx)
        total = np.zeros((idx.shape[0], 3))
        hits = np.zeros(idx.shape[0])
        for d in _AXIS_DIRS:
            hit, _, rgb = raycast_axis(mesh, centers, d)
            total += np.where(hit[:, None], rgb, 0.0)
            hits += hit
        got = hits > 0
        mean = np.zeros_like(total)
        mean[got] = total[got] / hits[got, None]
        rgb8 = np.clip(np.rint(mean), 0, 255).astype(np.uint8)
        for row, ok in enumerate(got):
            i, j, k = (int(v) for v in idx[row])
            if ok:
                color[i, j, k] = rgb8[row]
            else:
                color[i, j, k] = CLASS_COLORS[SemanticClass(int(grid.klass[i, j, k]))]
                misses.append((i, j, k))
    out = grid.replace_fields(color=color)
    return (out, misses) if return_misses else out


def threshold_and_crop(grid: OccupancyGrid, theta: float = DEFAULT_THETA, roi=None) -> OccupancyGrid:
    """Clear voxels below the probability threshold or outside the ROI box.

    roi is ((xmin, ymin, zmin), (xmax, ymax, zmax)) in meters; a voxel
    survives when its center lies inside. Cleared voxels become Empty with
    probability 0 and black color.
    """
    keep = grid.prob >= np.float32(theta)
    if roi is not None:
        lo = np.asarray(roi[0], dtype=np.float64)
        hi = np.asarray(roi[1], dtype=np.float64)
        if np.any(hi <= lo):
            raise OccupancyError(f"degenerate ROI {roi}")
        centers = grid.spec.centers()
        inside = np.all((centers >= lo) & (centers <= hi), axis=-1)
        keep &= inside
    keep &= grid.occupied_mask()
    prob = np.where(keep, grid.prob, np.float32(0.0))
    klass = np.where(keep, grid.klass, np.uint8(0))
    color = np.where(keep[..., None], grid.color, np.uint8(0))
    return OccupancyGrid(grid.spec, prob, klass, color)


def roi_index_bounds(spec: GridSpec, roi) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Half-open index ranges of voxels whose centers fall inside roi."""
    lo = np.asarray(roi[0], dtype=np.float64)
    hi = np.asarray(roi[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise OccupancyError(f"degenerate ROI {roi}")
    org = spec.origin.astype(np.float64)
    vs = spec.voxel_size.astype(np.float64)
    first = np.maximum(np.ceil((lo - org) / vs - 0.5), 0).astype(int)
    last = np.minimum(np.floor((hi - org) / vs - 0.5), np.asarray(spec.dims) - 1).astype(int)
    return tuple((int(f), int(l) + 1) for f, l in zip(first, last))


def _records(grid: OccupancyGrid) -> np.ndarray:
    rec = np.empty(grid.spec.n_voxels, dtype=RECORD_DTYPE)
    rec["klass"] = grid.klass.transpose(2, 1, 0).ravel()
    rec["prob"] = grid.prob.transpose(2, 1, 0).ravel()
    rec["rgb"] = grid.color.transpose(2, 1, 0, 3).reshape(-1, 3)
    return rec


def dump_bytes(grid: OccupancyGrid) -> bytes:
    L, W, H = grid.spec.dims
    header = MAGIC + struct.pack(
        "<BIII3f3f",
        VERSION,
        L,
        W,
        H,
        *grid.spec.voxel_size.astype(np.float32),
        *grid.spec.origin.astype(np.float32),
    )
    assert len(header) == HEADER_SIZE
    return header + _records(grid).tobytes()


def write_dump(path, grid: OccupancyGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(grid))


def load_bytes(data: bytes) -> OccupancyGrid:
    if len(data) < HEADER_SIZE:
        raise OccupancyFormatError("truncated header", len(data))
    if data[:4] != MAGIC:
        raise OccupancyFormatError(f"bad magic {data[:4]!r}", 0)
    version = data[4]
    if version != VERSION:
        raise OccupancyFormatError(f"unsupported version {version}", 4)
    L, W, H = struct.unpack_from("<III", data, 5)
    if L <= 0 or W <= 0 or H <= 0:
        raise OccupancyFormatError("non-positive dims", 5)
    voxel_size = np.frombuffer(data, dtype="<f4", count=3, offset=17)
    origin = np.frombuffer(data, dtype="<f4", count=3, offset=29)
    n = L * W * H
    want = HEADER_SIZE + n * RECORD_DTYPE.itemsize
    if len(data) < want:
        raise OccupancyFormatError(f"truncated records, expected {want} bytes", len(data))
    if len(data) > want:
        raise OccupancyFormatError("trailing bytes after records", want)
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=n, offset=HEADER_SIZE)
    spec = GridSpec((L, W, H), voxel_size.copy(), origin.copy())
    klass = rec["klass"].reshape(H, W, L).transpose(2, 1, 0)
    prob = rec["prob"].reshape(H, W, L).transpose(2, 1, 0)
    color = rec["rgb"].reshape(H, W, L, 3).transpose(2, 1, 0, 3)
    if np.any(klass > int(SemanticClass.NOISE)):
        bad = int(np.argmax(rec["klass"] > int(SemanticClass.NOISE)))
        raise OccupancyFormatError("unknown class id", HEADER_SIZE + bad * RECORD_DTYPE.itemsize)
    return OccupancyGrid(spec, prob.copy(), klass.copy(), color.copy())


def read_dump(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
