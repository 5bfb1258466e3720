"""Graph construction over voxel particles and multi-scale feature lookup.

A state graph connects object and finger points within a neighborhood
radius, with typed directed edges. Feature pyramids hold per-level dense
grids at strides 1, 2, 4, 8 over the base lattice plus a 2D bird's-eye-view
lattice; node features are gathered by strided index lookups and bilinear
BEV interpolation, then concatenated. Feature lookups are frozen at a
reference frame; consumers decide when to refresh them.

FPY1 file layout (little endian): magic "FPY1", u32 entry count, then per
entry u32 L,W,H, u32 C and L*W*H*C f32 features in x-fastest cell order.
The final entry is the BEV lattice stored with H = 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .occupancy import GridSpec
from .sampling import VoxelSet

FPY_MAGIC = b"FPY1"
STRIDES = (1, 2, 4, 8)
DEFAULT_BEV_STRIDE = 2
DEFAULT_R_NBR = 0.009
HISTORY_LEN = 3


class GraphError(ValueError):
    pass


class FeatureFormatError(GraphError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class EdgeRelation(IntEnum):
    INTERNAL = 0
    FINGER_TO_OBJECT = 1


@dataclass(frozen=True)
class StateGraph:
    """Vertices are object points followed by finger points. Edges are
    directed (receiver, sender) pairs in receiver-major order."""

    vertices: VoxelSet
    n_object: int
    receivers: np.ndarray
    senders: np.ndarray
    relations: np.ndarray
    history: tuple[np.ndarray, ...]

    @property
    def n_edges(self) -> int:
        return self.receivers.shape[0]

    def edge_list(self) -> list[tuple[int, int, EdgeRelation]]:
        return [
            (int(r), int(s), EdgeRelation(int(t)))
            for r, s, t in zip(self.receivers, self.senders, self.relations)
        ]


def build_graph(state: VoxelSet, fingers: VoxelSet, r_nbr: float = DEFAULT_R_NBR, history=()) -> StateGraph:
    """Radius-neighbor graph over object plus finger points.

    Object-object pairs get INTERNAL edges, mixed pairs FINGER_TO_OBJECT,
    finger-finger pairs none. Both directions are emitted, no self loops.
    ``history`` holds previous object-point frames, most recent first; it is
    padded to length 3 by repeating its oldest frame (or the current one).
    """
    if r_nbr <= 0:
        raise GraphError(f"r_nbr must be positive, got {r_nbr}")
    n_obj = len(state)
    pts = np.concatenate([state.points, fingers.points], axis=0)
    colors = np.concatenate([state.colors, fingers.colors], axis=0)
    classes = np.concatenate([state.classes, fingers.classes], axis=0)
    verts = VoxelSet(pts, colors, classes)

    n = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    within = dist <= r_nbr
    np.fill_diagonal(within, False)
    is_finger = np.arange(n) >= n_obj
    both_finger = is_finger[:, None] & is_finger[None, :]
    within &= ~both_finger

    recv, send = np.nonzero(within)  # row-major: receiver-major order
    mixed = is_finger[recv] ^ is_finger[send]
    rel = np.where(mixed, np.uint8(EdgeRelation.FINGER_TO_OBJECT), np.uint8(EdgeRelation.INTERNAL))

    frames = [np.asarray(h, dtype=np.float64).reshape(n_obj, 3) for h in history]
    if len(frames) > HISTORY_LEN:
        frames = frames[:HISTORY_LEN]
    pad_src = frames[-1] if frames else state.points
    while len(frames) < HISTORY_LEN:
        frames.append(pad_src)
    return StateGraph(verts, n_obj, recv.astype(np.int64), send.astype(np.int64), rel, tuple(frames))


@dataclass(frozen=True)
class BevLattice:
    """2D feature lattice over the xy footprint of a base grid."""

    features: np.ndarray  # (Lb, Wb, C) float32
    origin_xy: np.ndarray  # (2,) float64
    cell_size: np.ndarray  # (2,) float64

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 3:
            raise GraphError("BEV features must be (L, W, C)")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "origin_xy", np.asarray(self.origin_xy, dtype=np.float64).reshape(2))
        object.__setattr__(self, "cell_size", np.asarray(self.cell_size, dtype=np.float64).reshape(2))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


def level_dims(base_dims, stride: int) -> tuple[int, int, int]:
    return tuple(-(-d // stride) for d in base_dims)


@dataclass(frozen=True)
class FeatureGridPyramid:
    """Dense feature levels at strides 1, 2, 4, 8 plus a BEV lattice."""

    spec: GridSpec
    levels: tuple[np.ndarray, ...]
    bev: BevLattice
    bev_stride: int = DEFAULT_BEV_STRIDE

    def __post_init__(self):
        if len(self.levels) != len(STRIDES):
            raise GraphError(f"expected {len(STRIDES)} levels, got {len(self.levels)}")
        lv = []
        for arr, stride in zip(self.levels, STRIDES):
            a = np.asarray(arr, dtype=np.float32)
            want = level_dims(self.spec.dims, stride)
            if a.ndim != 4 or a.shape[:3] != want:
                raise GraphError(f"level at stride {stride} must have dims {want}, got {a.shape}")
            lv.append(a)
        object.__setattr__(self, "levels", tuple(lv))
        want_bev = level_dims(self.spec.dims[:2] + (1,), self.bev_stride)[:2]
        if self.bev.features.shape[:2] != want_bev:
            raise GraphError(f"BEV dims {self.bev.features.shape[:2]} != expected {want_bev}")

    @property
    def feature_dim(self) -> int:
        # concatenation order: coarse to fine (strides 8, 4, 2) then BEV
        return sum(self.levels[i].shape[3] for i in (3, 2, 1)) + self.bev.feature_dim


def make_bev(spec: GridSpec, features, bev_stride: int = DEFAULT_BEV_STRIDE) -> BevLattice:
    cell = spec.voxel_size.astype(np.float64)[:2] * bev_stride
    return BevLattice(features, spec.origin.astype(np.float64)[:2], cell)


def strided_lookup(pyramid: FeatureGridPyramid, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features at strides 8, 4, 2 for a base-grid voxel index.

    Level cells are addressed by floor division of the base index.
    """
    idx = np.asarray(index, dtype=np.int64).reshape(3)
    if not bool(pyramid.spec.index_in_bounds(idx)):
        raise GraphError(f"voxel index {tuple(idx)} outside base grid {pyramid.spec.dims}")
    out = []
    for li in (3, 2, 1):
        stride = STRIDES[li]
        ci, cj, ck = (int(v // stride) for v in idx)
        out.append(pyramid.levels[li][ci, cj, ck])
    return tuple(out)


def bev_lookup(bev: BevLattice, point_xy, with_flag: bool = False):
    """Bilinear interpolation over the four enclosing BEV cell centers.

    Queries outside the center rectangle are clamped to it; the optional
    flag reports whether clamping happened.
    """
    q = np.asarray(point_xy, dtype=np.float64).reshape(2)
    Lb, Wb, _ = bev.features.shape
    u = (q - bev.origin_xy) / bev.cell_size - 0.5
    clamped = bool(u[0] < 0 or u[1] < 0 or u[0] > Lb - 1 or u[1] > Wb - 1)
    u = np.clip(u, 0.0, [Lb - 1, Wb - 1])
    i0 = np.minimum(np.floor(u).astype(np.int64), [Lb - 2 if Lb > 1 else 0, Wb - 2 if Wb > 1 else 0])
    i0 = np.maximum(i0, 0)
    fx, fy = u - i0
    i1 = np.minimum(i0 + 1, [Lb - 1, Wb - 1])
    f = bev.features.astype(np.float64)
    val = (
        f[i0[0], i0[1]] * (1 - fx) * (1 - fy)
        + f[i1[0], i0[1]] * fx * (1 - fy)
        + f[i0[0], i1[1]] * (1 - fx) * fy
        + f[i1[0], i1[1]] * fx * fy
    )
    return (val, clamped) if with_flag else val


def aggregate_node_features(pyramid: FeatureGridPyramid, graph: StateGraph) -> np.ndarray:
    """Per-vertex concatenation of strided lookups and the BEV feature,
    ordered coarse-to-fine then BEV. All vertices must map into the grid."""
    pts = graph.vertices.points
    idx = pyramid.spec.world_to_index(pts)
    ok = pyramid.spec.index_in_bounds(idx)
    if not np.all(ok):
        bad = int(np.argmax(~ok))
        raise GraphError(f"vertex {bad} at {tuple(pts[bad])} outside the base grid")
    out = np.empty((pts.shape[0], pyramid.feature_dim))
    for row in range(pts.shape[0]):
        f8, f4, f2 = strided_lookup(pyramid, idx[row])
        fb = bev_lookup(pyramid.bev, pts[row, :2])
        out[row] = np.concatenate([f8, f4, f2, fb])
    return out


def make_synthetic_pyramid(spec: GridSpec, dims=(4, 4, 4, 4), bev_dim: int = 4, kind: str = "random", seed: int = 0, bev_stride: int = DEFAULT_BEV_STRIDE) -> FeatureGridPyramid:
    """Deterministic feature pyramid for tests and demos.

    kind="random" draws from a seeded generator; kind="affine" makes every
    channel an affine function of the cell center so interpolation can be
    checked exactly.
    """
    rng = np.random.default_rng(seed)
    levels = []
    for stride, C in zip(STRIDES, dims):
        shape = level_dims(spec.dims, stride) + (C,)
        if kind == "random":
            levels.append(rng.standard_normal(shape).astype(np.float32))
        elif kind == "affine":
            L, W, H = shape[:3]
            ii, jj, kk = np.meshgrid(np.arange(L), np.arange(W), np.arange(H), indexing="ij")
            coef = rng.standard_normal((C, 4))
            feats = np.stack(
                [coef[c, 0] * ii + coef[c, 1] * jj + coef[c, 2] * kk + coef[c, 3] for c in range(C)],
                axis=-1,
            )
            levels.append(feats.astype(np.float32))
        else:
            raise GraphError(f"unknown synthetic kind {kind!r}")
    Lb, Wb = level_dims(spec.dims[:2] + (1,), bev_stride)[:2]
    if kind == "random":
        bev_feats = rng.standard_normal((Lb, Wb, bev_dim)).astype(np.float32)
    else:
        ii, jj = np.meshgrid(np.arange(Lb), np.arange(Wb), indexing="ij")
        coef = rng.standard_normal((bev_dim, 3))
        bev_feats = np.stack(
            [coef[c, 0] * ii + coef[c, 1] * jj + coef[c, 2] for c in range(bev_dim)], axis=-1
        ).astype(np.float32)
    return FeatureGridPyramid(spec, tuple(levels), make_bev(spec, bev_feats, bev_stride), bev_stride)


def pyramid_bytes(pyramid: FeatureGridPyramid) -> bytes:
    chunks = [FPY_MAGIC, struct.pack("<I", len(pyramid.levels) + 1)]
    for arr in pyramid.levels:
        L, W, H, C = arr.shape
        chunks.append(struct.pack("<IIII", L, W, H, C))
        chunks.append(np.ascontiguousarray(arr.transpose(2, 1, 0, 3), dtype="<f4").tobytes())
    bev = pyramid.bev.features
    Lb, Wb, Cb = bev.shape
    chunks.append(struct.pack("<IIII", Lb, Wb, 1, Cb))
    chunks.append(np.ascontiguousarray(bev.reshape(Lb, Wb, 1, Cb).transpose(2, 1, 0, 3), dtype="<f4").tobytes())
    return b"".join(chunks)


def write_pyramid(path, pyramid: FeatureGridPyramid) -> None:
    with open(path, "wb") as fh:
        fh.write(pyramid_bytes(pyramid))


def pyramid_from_bytes(data: bytes, spec: GridSpec, bev_stride: int = DEFAULT_BEV_STRIDE) -> FeatureGridPyramid:
    if len(data) < 8:
        raise FeatureFormatError("truncated header", len(data))
    if data[:4] != FPY_MAGIC:
        raise FeatureFormatError(f"bad magic {data[:4]!r}", 0)
    (count,) = struct.unpack_from("<I", data, 4)
    if count != len(STRIDES) + 1:
        raise FeatureFormatError(f"expected {len(STRIDES) + 1} entries, got {count}", 4)
    off = 8
    entries = []
    for _ in range(count):
        if len(data) < off + 16:
            raise FeatureFormatError("truncated entry header", len(data))
        L, W, H, C = struct.unpack_from("<IIII", data, off)
        off += 16
        n = L * W * H * C
        if len(data) < off + 4 * n:
            raise FeatureFormatError("truncated feature data", len(data))
        flat = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        off += 4 * n
        entries.append(((L, W, H), flat.reshape(H, W, L, C).transpose(2, 1, 0, 3).copy()))
    if off != len(data):
        raise FeatureFormatError("trailing bytes", off)
    levels = []
    for (dims3, arr), stride in zip(entries[:-1], STRIDES):
        if dims3 != level_dims(spec.dims, stride):
            raise FeatureFormatError(
                f"level dims {dims3} disagree with stride {stride} of base {spec.dims}", 0
            )
        levels.append(arr)
    bev_dims, bev_arr = entries[-1]
    if bev_dims[2] != 1:
        raise FeatureFormatError(f"BEV entry must have H=1, got {bev_dims}", 0)
    bev = make_bev(spec, bev_arr[:, :, 0, :], bev_stride)
    return FeatureGridPyramid(spec, tuple(levels), bev, bev_stride)


def read_pyramid(path, spec: GridSpec, bev_stride: int = DEFAULT_BEV_STRIDE) -> FeatureGridPyramid:
    with open(path, "rb") as fh:
        return pyramid_from_bytes(fh.read(), spec, bev_stride)
