"""Quasi-static surrogate for pinching a particle-based plasticine blob.

Fingers are vertical capsules that close linearly over a fixed number of
substeps. Particles caught inside a capsule are projected to its surface;
particles squeezed between both fingers escape sideways, perpendicular to
the grasp axis. A damped Jacobi relaxation keeps particles a minimum
distance apart and above the plane. Displacement is permanent: nothing
springs back when the fingers reopen.

Everything here is deterministic and free of RNG state; scenes are
immutable and steps return new scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .occupancy import point_segment_distance
from .sampling import VoxelSet

_RELAX_OMEGA = 0.5
_NAIVE_PAIR_LIMIT = 4000


class DynamicsError(ValueError):
    pass


class ActionRejected(DynamicsError):
    pass


class RolloutError(RuntimeError):
    """Carries the partial trajectory and the index of the failing action."""

    def __init__(self, states, index: int, cause: Exception):
        super().__init__(f"rollout failed at action {index}: {cause}")
        self.states = states
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class Capsule:
    """Vertical capsule: axis segment of ``length`` centered at ``center``."""

    center: np.ndarray
    radius: float
    length: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        if self.radius <= 0 or self.length <= 0:
            raise DynamicsError("capsule radius and length must be positive")

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.array([0.0, 0.0, self.length / 2.0])
        return self.center - half, self.center + half

    def distance(self, points) -> np.ndarray:
        a, b = self.endpoints()
        return point_segment_distance(points, a, b)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        return self.distance(points) < self.radius - tol


@dataclass(frozen=True)
class GripperAction:
    """One pinch: grasp center (x, y, z), yaw of the grasp line r_z, start
    width l and final width l_end, all in meters/radians."""

    x: float
    y: float
    z: float
    r_z: float
    l: float
    l_end: float

    def __post_init__(self):
        if self.l <= 0 or self.l_end <= 0:
            raise DynamicsError("finger widths must be positive")
        if self.l_end > self.l:
            raise DynamicsError(f"l_end {self.l_end} exceeds initial width {self.l}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def grasp_dir(self) -> np.ndarray:
        return np.array([np.cos(self.r_z), np.sin(self.r_z), 0.0])

    def finger_centers(self, width: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        w = self.l if width is None else width
        u = self.grasp_dir
        return self.center - (w / 2.0) * u, self.center + (w / 2.0) * u

    def as_dict(self) -> dict[str, float]:
        return {
            "x": self.x,
            "y": self.y,
            "z": self.z,
            "r_z": self.r_z,
            "l": self.l,
            "l_end": self.l_end,
        }


@dataclass(frozen=True)
class Scene:
    """Plasticine particles, the two finger capsules, the plane height and
    the particle lattice pitch (also the relaxation distance)."""

    plasticine: VoxelSet
    fingers: tuple[Capsule, Capsule]
    plane_height: float
    voxel_size: float

    def with_particles(self, points) -> "Scene":
        return replace(self, plasticine=self.plasticine.with_points(points))


@dataclass(frozen=True)
class StepParams:
    substeps: int = 10
    n_relax: int = 20
    d_min: float | None = None
    relax_tol: float = 1e-12
    settle_cap: int = 600

    def __post_init__(self):
        if self.substeps < 1 or self.n_relax < 0:
            raise DynamicsError("substeps must be >= 1 and n_relax >= 0")


def _overlap_pairs(pts: np.ndarray, d_min: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index pairs (i < j) closer than d_min, with their distances."""
    n = pts.shape[0]
    if n <= _NAIVE_PAIR_LIMIT:
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        iu, ju = np.triu_indices(n, k=1)
        d = dist[iu, ju]
        close = d < d_min
        return iu[close], ju[close], d[close]
    tree = cKDTree(pts)
    pairs = tree.query_pairs(d_min, output_type="ndarray")
    if pairs.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    close = d < d_min
    return pairs[close, 0], pairs[close, 1], d[close]


def _separation_dirs(pts, i, j, d):
    dirs = np.zeros((len(d), 3))
    ok = d > 0
    dirs[ok] = (pts[j[ok]] - pts[i[ok]]) / d[ok, None]
    dirs[~ok] = np.array([1.0, 0.0, 0.0])  # coincident pair: split along +x
    return dirs


def _relax_sweep(pts: np.ndarray, d_min: float) -> tuple[np.ndarray, float]:
    i, j, d = _overlap_pairs(pts, d_min)
    if len(d) == 0:
        return pts, 0.0
    dirs = _separation_dirs(pts, i, j, d)
    push = (_RELAX_OMEGA * 0.5) * (d_min - d)
    disp = np.zeros_like(pts)
    np.add.at(disp, j, push[:, None] * dirs)
    np.add.at(disp, i, -push[:, None] * dirs)
    out = pts + disp
    return out, float(np.abs(disp).max())


def _lateral_escape(pts: np.ndarray, inside: np.ndarray, center, u, v, half_w: float, radius: float) -> np.ndarray:
    """Move particles sideways (along +-v) until outside both finger
    cylinders. Used for particles caught between the closing fingers."""
    out = pts.copy()
    rel = pts[inside] - center
    cu = rel @ u
    cv = rel @ v
    gap2 = radius * radius - np.minimum((cu - half_w) ** 2, (cu + half_w) ** 2)
    need = np.sqrt(np.maximum(gap2, 0.0)) + 1e-12
    sign = np.where(cv >= 0.0, 1.0, -1.0)
    shift = (sign * need - cv)[:, None] * v
    out[inside] = pts[inside] + shift
    return out


def _resolve_capsules(pts: np.ndarray, caps: tuple[Capsule, Capsule], center, u, v, half_w: float) -> np.ndarray:
    """Project particles out of the finger capsules. Radial projection for
    a single capsule, lateral escape when caught by both."""
    radius = caps[0].radius
    out = pts
    for _ in range(8):
        in_a = caps[0].contains(out)
        in_b = caps[1].contains(out)
        if not (in_a.any() or in_b.any()):
            return out
        both = in_a & in_b
        if both.any():
            out = _lateral_escape(out, both, center, u, v, half_w, radius)
            in_a = caps[0].contains(out)
            in_b = caps[1].contains(out)
        for cap, mask in ((caps[0], in_a & ~in_b), (caps[1], in_b & ~in_a)):
            if not mask.any():
                continue
            a, b = cap.endpoints()
            sub = out[mask]
            ab = b - a
            t = np.clip(((sub - a) @ ab) / float(ab @ ab), 0.0, 1.0)
            q = a + t[:, None] * ab
            delta = sub - q
            d = np.linalg.norm(delta, axis=1)
            dirs = np.where(d[:, None] > 0, delta / np.where(d[:, None] > 0, d[:, None], 1.0), v)
            moved = out.copy()
            moved[mask] = q + cap.radius * dirs
            out = moved
    still = caps[0].contains(out) | caps[1].contains(out)
    if still.any():
        out = _lateral_escape(out, still, center, u, v, half_w, radius)
    return out


def _clamp_plane(pts: np.ndarray, plane_height: float) -> np.ndarray:
    z = pts[:, 2]
    if np.all(z >= plane_height):
        return pts
    out = pts.copy()
    out[:, 2] = np.maximum(z, plane_height)
    return out


def _fingers_at(action: GripperAction, width: float, radius: float, length: float) -> tuple[Capsule, Capsule]:
    pa, pb = action.finger_centers(width)
    return Capsule(pa, radius, length), Capsule(pb, radius, length)


def step(scene: Scene, action: GripperAction, params: StepParams = StepParams(), bounds=None, record: list | None = None) -> Scene:
    """Apply one pinch and return the resulting scene.

    Rejects actions whose final width would overlap the fingers or that
    leave the given workspace bounds. The returned scene has the fingers at
    their closed pose.
    """
    radius = scene.fingers[0].radius
    length = scene.fingers[0].length
    if action.l_end < 2.0 * radius:
        raise ActionRejected(f"l_end {action.l_end:.4f} closes below finger contact {2 * radius:.4f}")
    if bounds is not None:
        lo, hi = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
        pos = action.center
        if np.any(pos < lo) or np.any(pos > hi):
            raise ActionRejected(f"grasp center {tuple(pos)} outside workspace bounds")

    d_min = scene.voxel_size if params.d_min is None else params.d_min
    u = action.grasp_dir
    v = np.array([-u[1], u[0], 0.0])
    center = action.center

    pts = scene.plasticine.points.copy()
    caps = scene.fingers
    for s in range(1, params.substeps + 1):
        width = action.l + (action.l_end - action.l) * (s / params.substeps)
        caps = _fingers_at(action, width, radius, length)
        before = pts
        pts = _resolve_capsules(pts, caps, center, u, v, width / 2.0)
        pts = _clamp_plane(pts, scene.plane_height)
        sweeps = 0
        for _ in range(params.n_relax):
            pts, moved = _relax_sweep(pts, d_min)
            pts = _resolve_capsules(pts, caps, center, u, v, width / 2.0)
            pts = _clamp_plane(pts, scene.plane_height)
            sweeps += 1
            if moved < params.relax_tol:
                break
        if record is not None:
            record.append(
                {
                    "substep": s,
                    "width": float(width),
                    "relax_sweeps": sweeps,
                    "max_move": float(np.abs(pts - before).max()) if pts.size else 0.0,
                }
            )

    # settle to a fixed point so repeating the action is a no-op
    for _ in range(params.settle_cap):
        pts, moved = _relax_sweep(pts, d_min)
        pts = _resolve_capsules(pts, caps, center, u, v, action.l_end / 2.0)
        pts = _clamp_plane(pts, scene.plane_height)
        if moved < params.relax_tol:
            break

    # plane clamp only raises z and lateral escape is horizontal, so this
    # order leaves both constraints satisfied exactly
    pts = _clamp_plane(pts, scene.plane_height)
    inside = caps[0].contains(pts) | caps[1].contains(pts)
    if inside.any():
        pts = _lateral_escape(pts, inside, center, u, v, action.l_end / 2.0, radius)

    return replace(scene, plasticine=scene.plasticine.with_points(pts), fingers=caps)


def simulate_pinch(scene: Scene, action: GripperAction, params: StepParams = StepParams(), bounds=None):
    records: list[dict] = []
    out = step(scene, action, params, bounds, record=records)
    return out, records


def rollout(scene: Scene, actions, params: StepParams = StepParams(), bounds=None) -> list[Scene]:
    """Apply actions in order; returns [initial, after action 0, ...].

    On failure raises RolloutError carrying the partial trajectory and the
    failing index.
    """
    states = [scene]
    for i, action in enumerate(actions):
        try:
            states.append(step(states[-1], action, params, bounds))
        except DynamicsError as exc:
            raise RolloutError(states, i, exc) from exc
    return states


def containment_violations(scene: Scene, eps: float = 1e-9) -> int:
    """Particles penetrating a finger capsule or the plane deeper than eps."""
    pts = scene.plasticine.points
    bad = np.zeros(pts.shape[0], dtype=bool)
    for cap in scene.fingers:
        bad |= cap.distance(pts) < cap.radius - eps
    bad |= pts[:, 2] < scene.plane_height - eps
    return int(bad.sum())


def block_particles(extents, spacing: float, center_xy=(0.0, 0.0), z0: float = 0.0) -> np.ndarray:
    """Particle lattice filling a box of the given (x, y, z) extents,
    resting on z0. Lattice pitch = spacing, particles at cell centers."""
    ext = np.asarray(extents, dtype=np.float64)
    counts = np.maximum(np.round(ext / spacing).astype(int), 1)
    axes = []
    for n, e, c in zip(counts, ext, (center_xy[0], center_xy[1], None)):
        span = n * spacing
        if c is None:
            start = z0 + spacing / 2.0
        else:
            start = c - span / 2.0 + spacing / 2.0
        axes.append(start + spacing * np.arange(n))
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)


def make_scene(particles, finger_radius: float, finger_length: float, plane_height: float = 0.0, particle_spacing: float = 0.004, parked=((0.08, 0.08, 0.06), (-0.08, 0.08, 0.06))) -> Scene:
    """Scene with the fingers parked away from the material."""
    caps = (
        Capsule(np.asarray(parked[0], dtype=np.float64), finger_radius, finger_length),
        Capsule(np.asarray(parked[1], dtype=np.float64), finger_radius, finger_length),
    )
    return Scene(VoxelSet.from_points(particles), caps, plane_height, particle_spacing)
