"""Triangle meshes with per-vertex color, ASCII PLY I/O, and exact signed
distance queries.

Sign convention: negative inside, positive outside. The sign comes from the
angle-weighted pseudonormal of the closest surface feature (face, edge or
vertex), which is exact for closed, consistently oriented meshes and flips
with face orientation. Distances are exact closest-triangle distances.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_BARY_TOL = 1e-9
_RAY_EPS = 1e-14


class MeshError(ValueError):
    """Malformed, degenerate or non-watertight mesh."""


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh. Vertices in meters, colors uint8 RGB.

    Vertices may be duplicated (e.g. to give faces distinct colors);
    topological checks merge vertices by exact position first.
    """

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        c = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if c.shape[0] != v.shape[0]:
            raise MeshError("one RGB triple per vertex required")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise MeshError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "colors", c)
        v.setflags(write=False)
        f.setflags(write=False)
        c.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def translated(self, offset) -> "TriMesh":
        return replace(self, vertices=self.vertices + np.asarray(offset, dtype=np.float64))

    def flipped(self) -> "TriMesh":
        """Same geometry with all face orientations reversed."""
        return replace(self, faces=self.faces[:, ::-1])

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _canonical_vertex_ids(mesh: TriMesh) -> np.ndarray:
    """Map vertex indices to ids shared by all exact-duplicate positions."""
    _, inverse = np.unique(mesh.vertices, axis=0, return_inverse=True)
    return inverse.reshape(-1)


def watertight_defects(mesh: TriMesh) -> list[tuple[int, int, int]]:
    """Edges that break closedness, as (vertex_a, vertex_b, signed_count).

    An edge is sound when it is traversed equally often in both directions
    by consistently oriented faces. A nonzero signed count means a boundary
    or an orientation flip. Vertex identity is positional.
    """
    canon = _canonical_vertex_ids(mesh)
    faces = canon[mesh.faces]
    signed: dict[tuple[int, int], int] = {}
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            if a == b:
                return [(int(a), int(b), 0)]
            key, s = ((int(a), int(b)), 1) if a < b else ((int(b), int(a)), -1)
            signed[key] = signed.get(key, 0) + s
    return [(a, b, n) for (a, b), n in signed.items() if n != 0]


def is_watertight(mesh: TriMesh) -> bool:
    return mesh.n_faces > 0 and not watertight_defects(mesh)


def require_watertight(mesh: TriMesh) -> None:
    defects = watertight_defects(mesh) if mesh.n_faces else [(-1, -1, 0)]
    if defects:
        head = ", ".join(f"({a},{b}):{n:+d}" for a, b, n in defects[:8])
        raise MeshError(f"mesh is not watertight; offending edges {head}")


def _face_geometry(mesh: TriMesh):
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    raw = np.cross(e1, e2)
    area2 = np.linalg.norm(raw, axis=1)
    if np.any(area2 <= 0.0):
        raise MeshError("degenerate (zero-area) face")
    normals = raw / area2[:, None]
    return tri, normals


def _corner_angles(tri: np.ndarray) -> np.ndarray:
    """Interior angle at each of the three corners, (m, 3)."""
    out = np.empty((tri.shape[0], 3))
    for c in range(3):
        u = tri[:, (c + 1) % 3] - tri[:, c]
        w = tri[:, (c + 2) % 3] - tri[:, c]
        nu = np.linalg.norm(u, axis=1)
        nw = np.linalg.norm(w, axis=1)
        cosang = np.clip((u * w).sum(axis=1) / (nu * nw), -1.0, 1.0)
        out[:, c] = np.arccos(cosang)
    return out


class _PseudonormalTable:
    """Angle-weighted pseudonormals per face, edge and vertex."""

    def __init__(self, mesh: TriMesh):
        self.canon = _canonical_vertex_ids(mesh)
        tri, normals = _face_geometry(mesh)
        self.tri = tri
        self.face_normals = normals
        faces = self.canon[mesh.faces]
        angles = _corner_angles(tri)

        n_canon = int(self.canon.max()) + 1 if self.canon.size else 0
        vert = np.zeros((n_canon, 3))
        for c in range(3):
            np.add.at(vert, faces[:, c], angles[:, c, None] * normals)
        self.vertex_normals = vert

        edges: dict[tuple[int, int], np.ndarray] = {}
        for fi in range(faces.shape[0]):
            a, b, c = (int(x) for x in faces[fi])
            for p, q in ((a, b), (b, c), (c, a)):
                key = (p, q) if p < q else (q, p)
                acc = edges.get(key)
                edges[key] = normals[fi].copy() if acc is None else acc + normals[fi]
        self.edge_normals = edges
        self.canon_faces = faces

    def feature_normal(self, face_idx: int, bary: np.ndarray) -> np.ndarray:
        small = bary < _BARY_TOL
        n_small = int(small.sum())
        if n_small == 0:
            return self.face_normals[face_idx]
        f = self.canon_faces[face_idx]
        if n_small == 1:
            # closest point on the edge opposite the vanishing coordinate
            zero = int(np.argmax(small))
            p, q = int(f[(zero + 1) % 3]), int(f[(zero + 2) % 3])
            key = (p, q) if p < q else (q, p)
            return self.edge_normals[key]
        corner = int(np.argmax(~small))
        return self.vertex_normals[int(f[corner])]


def _closest_point_chunk(points: np.ndarray, tri: np.ndarray):
    """Closest point on every triangle for every query point.

    points (n, 3), tri (m, 3, 3). Returns squared distances (n, m) and the
    closest points (n, m, 3). Standard per-region projection.
    """
    a = tri[:, 0]
    ab = tri[:, 1] - a
    ac = tri[:, 2] - a
    p = points[:, None, :]

    ap = p - a[None, :, :]
    d1 = (ab[None] * ap).sum(-1)
    d2 = (ac[None] * ap).sum(-1)

    bp = p - tri[:, 1][None]
    d3 = (ab[None] * bp).sum(-1)
    d4 = (ac[None] * bp).sum(-1)

    cp = p - tri[:, 2][None]
    d5 = (ab[None] * cp).sum(-1)
    d6 = (ac[None] * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n, m = d1.shape
    v = np.zeros((n, m))
    w = np.zeros((n, m))

    # face region by default
    denom = va + vb + vc
    safe = np.where(denom == 0.0, 1.0, denom)
    v[:] = vb / safe
    w[:] = vc / safe

    # edge AC
    t_ac = np.clip(np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0.0), 0.0, 1.0)
    on_ac = (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
    v = np.where(on_ac, 0.0, v)
    w = np.where(on_ac, t_ac, w)

    # edge BC
    t_bc = np.clip(
        np.divide(d4 - d3, (d4 - d3) + (d5 - d6), out=np.zeros_like(d4), where=((d4 - d3) + (d5 - d6)) != 0.0),
        0.0,
        1.0,
    )
    on_bc = (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0)
    v = np.where(on_bc, 1.0 - t_bc, v)
    w = np.where(on_bc, t_bc, w)

    # edge AB
    t_ab = np.clip(np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0.0), 0.0, 1.0)
    on_ab = (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
    v = np.where(on_ab, t_ab, v)
    w = np.where(on_ab, 0.0, w)

    # vertex regions last so they win
    at_a = (d1 <= 0.0) & (d2 <= 0.0)
    v = np.where(at_a, 0.0, v)
    w = np.where(at_a, 0.0, w)
    at_b = (d3 >= 0.0) & (d4 <= d3)
    v = np.where(at_b, 1.0, v)
    w = np.where(at_b, 0.0, w)
    at_c = (d6 >= 0.0) & (d5 <= d6)
    v = np.where(at_c, 0.0, v)
    w = np.where(at_c, 1.0, w)

    closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
    diff = points[:, None, :] - closest
    dist2 = (diff * diff).sum(-1)
    return dist2, closest


def _point_chunks(n_points: int, n_faces: int) -> int:
    budget = 500_000
    return max(8, budget // max(n_faces, 1))


def signed_distance(mesh: TriMesh, points) -> np.ndarray:
    """Signed distance from each query point to the mesh surface.

    Requires a watertight mesh. Ties on the closest feature resolve through
    the pseudonormal of whichever face wins the (deterministic) argmin.
    """
    require_watertight(mesh)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    table = _PseudonormalTable(mesh)
    tri = table.tri

    out = np.empty(pts.shape[0])
    step = _point_chunks(pts.shape[0], tri.shape[0])
    for lo in range(0, pts.shape[0], step):
        chunk = pts[lo : lo + step]
        dist2, closest = _closest_point_chunk(chunk, tri)
        best = np.argmin(dist2, axis=1)
        rows = np.arange(chunk.shape[0])
        cpts = closest[rows, best]
        d = np.sqrt(dist2[rows, best])
        for i in range(chunk.shape[0]):
            fi = int(best[i])
            bary = _barycentric(tri[fi], cpts[i])
            normal = table.feature_normal(fi, bary)
            s = float(np.dot(chunk[i] - cpts[i], normal))
            out[lo + i] = -d[i] if s < 0.0 else d[i]
    return out


def _barycentric(tri_one: np.ndarray, point: np.ndarray) -> np.ndarray:
    v0 = tri_one[1] - tri_one[0]
    v1 = tri_one[2] - tri_one[0]
    v2 = point - tri_one[0]
    d00 = float(v0 @ v0)
    d01 = float(v0 @ v1)
    d11 = float(v1 @ v1)
    d20 = float(v2 @ v0)
    d21 = float(v2 @ v1)
    denom = d00 * d11 - d01 * d01
    if denom == 0.0:
        return np.array([1.0, 0.0, 0.0])
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    return np.array([1.0 - v - w, v, w])


def contains(mesh: TriMesh, points) -> np.ndarray:
    """True where signed_distance <= 0 (inside or on the surface)."""
    return signed_distance(mesh, points) <= 0.0


def raycast_axis(mesh: TriMesh, origins, direction):
    """First hit of axis-aligned rays against the mesh.

    origins (n, 3); direction one of +-x, +-y, +-z as a 3-vector. Returns
    (hit_mask (n,), t (n,), rgb (n, 3) float interpolated vertex color).
    Misses leave t at inf and rgb at 0.
    """
    pts = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    col = mesh.colors[mesh.faces].astype(np.float64)

    n = pts.shape[0]
    best_t = np.full(n, np.inf)
    best_rgb = np.zeros((n, 3))

    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(d, e2)
    det = (e1 * pvec).sum(-1)
    ok_face = np.abs(det) > _RAY_EPS
    inv_det = np.where(ok_face, 1.0 / np.where(det == 0.0, 1.0, det), 0.0)

    step = _point_chunks(n, tri.shape[0])
    for lo in range(0, n, step):
        o = pts[lo : lo + step]
        tvec = o[:, None, :] - tri[:, 0][None]
        u = (tvec * pvec[None]).sum(-1) * inv_det[None]
        qvec = np.cross(tvec, e1[None])
        v = (qvec * d).sum(-1) * inv_det[None]
        t = (qvec * e2[None]).sum(-1) * inv_det[None]
        hit = (
            ok_face[None]
            & (u >= -1e-12)
            & (v >= -1e-12)
            & (u + v <= 1.0 + 1e-12)
            & (t >= 0.0)
        )
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        rows = np.arange(o.shape[0])
        tmin = t[rows, idx]
        best_t[lo : lo + step] = tmin
        uu = u[rows, idx]
        vv = v[rows, idx]
        c = col[idx]
        rgb = (1.0 - uu - vv)[:, None] * c[:, 0] + uu[:, None] * c[:, 1] + vv[:, None] * c[:, 2]
        best_rgb[lo : lo + step] = np.where(np.isfinite(tmin)[:, None], rgb, 0.0)
    return np.isfinite(best_t), best_t, best_rgb


def box_mesh(lo, hi, color=(200, 200, 200), face_colors=None) -> TriMesh:
    """Axis-aligned box with outward orientation.

    face_colors, when given, maps face keys from {-x,+x,-y,+y,-z,+z} to RGB
    and duplicates vertices so each side keeps its own color.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise MeshError("box upper corner must exceed lower corner")

    def corner(mask):
        return np.where(mask, hi, lo)

    # each side as four corners in CCW order seen from outside
    sides = {
        "-x": [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
        "+x": [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
        "-y": [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
        "+y": [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
        "-z": [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
        "+z": [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    }
    verts = []
    faces = []
    cols = []
    for key, quad in sides.items():
        rgb = color if face_colors is None else face_colors.get(key, color)
        base = len(verts)
        for mask in quad:
            verts.append(corner(np.asarray(mask, dtype=bool)))
            cols.append(rgb)
        faces.append((base, base + 1, base + 2))
        faces.append((base, base + 2, base + 3))
    return TriMesh(np.array(verts), np.array(faces), np.array(cols, dtype=np.uint8))


def read_ply(path) -> TriMesh:
    """Read an ASCII PLY with vertex x y z [red green blue] and faces."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    vert_props: list[str] = []
    element = None
    body_at = None
    for i, ln in enumerate(lines[1:], start=1):
        tok = ln.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshError(f"{path}: only ascii PLY supported")
        elif tok[0] == "element":
            element = tok[1]
            if element == "vertex":
                n_vert = int(tok[2])
            elif element == "face":
                n_face = int(tok[2])
        elif tok[0] == "property":
            if element == "vertex" and tok[1] != "list":
                vert_props.append(tok[-1])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None:
        raise MeshError(f"{path}: missing end_header")
    need = {"x", "y", "z"}
    if not need.issubset(vert_props):
        raise MeshError(f"{path}: vertex needs x y z properties")
    has_rgb = {"red", "green", "blue"}.issubset(vert_props)

    rows = lines[body_at:]
    if len(rows) < n_vert + n_face:
        raise MeshError(f"{path}: truncated body")
    xi = [vert_props.index(k) for k in ("x", "y", "z")]
    verts = np.empty((n_vert, 3))
    cols = np.full((n_vert, 3), 200, dtype=np.uint8)
    for i in range(n_vert):
        vals = rows[i].split()
        verts[i] = [float(vals[j]) for j in xi]
        if has_rgb:
            ci = [vert_props.index(k) for k in ("red", "green", "blue")]
            cols[i] = [int(vals[j]) for j in ci]
    faces = []
    for i in range(n_face):
        vals = rows[n_vert + i].split()
        cnt = int(vals[0])
        poly = [int(v) for v in vals[1 : 1 + cnt]]
        for k in range(1, cnt - 1):
            faces.append((poly[0], poly[k], poly[k + 1]))
    if n_face and not faces:
        raise MeshError(f"{path}: empty face list")
    return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), cols)


def write_ply(path, mesh: TriMesh) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {mesh.n_faces}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for v, c in zip(mesh.vertices, mesh.colors):
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
