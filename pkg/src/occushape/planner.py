"""Goal-conditioned pinch planning.

The initializer compares the current point set against the goal, keeps the
points that are far from any goal point, scores axis-aligned slab regions
by their summed nearest-goal distance, and derives a grasp line from the
two costliest regions. Refinement either samples Gaussian perturbations of
the initialization or runs a quasi-Newton pass on finite-difference
gradients; both score candidates by rolling out the pinch surrogate and
never return an action predicted worse than the evaluated initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import metrics
from .dynamics import (
    ActionRejected,
    DynamicsError,
    GripperAction,
    Scene,
    StepParams,
    step,
)
from .metrics import DCD_TRAIN, DcdParams, LossWeights
from .sampling import VoxelSet, fps_downsample


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class InitConfig:
    """Shape-based initialization knobs.

    m slabs per axis branch (3..6), tau_goal for the far-from-goal filter,
    margin added to the starting width, and the closed width as finger
    contact plus a material allowance.
    """

    m: int = 4
    tau_goal: float = 0.004
    margin: float | None = None
    finger_radius: float = 0.009
    l_allowance: float = 0.004

    def __post_init__(self):
        if not 3 <= self.m <= 6:
            raise PlannerError(f"m must be in [3, 6], got {self.m}")
        if self.tau_goal <= 0:
            raise PlannerError("tau_goal must be positive")

    @property
    def start_margin(self) -> float:
        return 2.0 * self.finger_radius if self.margin is None else self.margin

    @property
    def l_end(self) -> float:
        return 2.0 * self.finger_radius + self.l_allowance


@dataclass(frozen=True)
class Region:
    branch: str
    index: int
    lo: float
    hi: float
    n_points: int
    cost: float
    selected: bool = False


@dataclass(frozen=True)
class InitDetail:
    action: GripperAction | None
    regions: tuple[Region, ...] = ()
    n_residual: int = 0
    clamped: bool = False
    degenerate: bool = False
    goal_fallback: bool = False


def _wrap_half_turn(angle: float) -> float:
    return float(angle % math.pi)


def _slab_members(vals: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, len(edges) - 2)
    return idx


def init_detail(current_pts: np.ndarray, goal_pts: np.ndarray, cfg: InitConfig) -> InitDetail:
    cur = np.asarray(current_pts, dtype=np.float64).reshape(-1, 3)
    goal = np.asarray(goal_pts, dtype=np.float64).reshape(-1, 3)
    if cur.shape[0] == 0 or goal.shape[0] == 0:
        raise PlannerError("initializer needs non-empty current and goal sets")

    aligned = cur + (goal.mean(axis=0) - cur.mean(axis=0))
    _, dist = metrics._nearest(aligned, goal)
    residual_mask = dist >= cfg.tau_goal
    if not residual_mask.any():
        return InitDetail(action=None)
    sr = aligned[residual_mask]
    sr_cost = dist[residual_mask]

    regions: list[dict] = []
    for branch, axis in (("x", 0), ("y", 1)):
        lo, hi = float(sr[:, axis].min()), float(sr[:, axis].max())
        edges = np.linspace(lo, hi, cfg.m + 1)
        if hi == lo:
            edges = np.linspace(lo - 1e-9, hi + 1e-9, cfg.m + 1)
        member = _slab_members(sr[:, axis], edges)
        for r in range(cfg.m):
            mask = member == r
            regions.append(
                {
                    "branch": branch,
                    "index": r,
                    "lo": float(edges[r]),
                    "hi": float(edges[r + 1]),
                    "axis": axis,
                    "mask": mask,
                    "cost": float(sr_cost[mask].sum()),
                }
            )

    # two costliest regions pooled across both branches; ties prefer
    # branch x, then the lower slab index
    order = sorted(range(len(regions)), key=lambda i: (-regions[i]["cost"], regions[i]["branch"] != "x", regions[i]["index"]))

    def centroid(reg) -> np.ndarray:
        return sr[reg["mask"]].mean(axis=0)

    first = regions[order[0]]
    if first["cost"] <= 0.0:
        return InitDetail(action=None)
    second = None
    for i in order[1:]:
        reg = regions[i]
        if reg["cost"] <= 0.0 or not reg["mask"].any():
            continue
        if np.linalg.norm(centroid(reg) - centroid(first)) > 1e-9:
            second = reg
            break

    goal_fallback = False

    def goal_centroid(reg) -> np.ndarray:
        nonlocal goal_fallback
        axis = reg["axis"]
        inside = (goal[:, axis] >= reg["lo"]) & (goal[:, axis] <= reg["hi"])
        if not inside.any():
            goal_fallback = True
            return goal.mean(axis=0)
        return goal[inside].mean(axis=0)

    degenerate = second is None
    clamped = False
    if degenerate:
        # all residual mass in one spot: pinch across it, pushing toward
        # where the goal wants material
        c1 = centroid(first)
        to_goal = goal.mean(axis=0) - c1
        if np.linalg.norm(to_goal[:2]) < 1e-12:
            direction = np.array([1.0, 0.0])
        else:
            direction = to_goal[:2] / np.linalg.norm(to_goal[:2])
        r_z = _wrap_half_turn(math.atan2(direction[1], direction[0]))
        span = sr[first["mask"]] - c1
        extent = float(np.abs(span[:, :2] @ direction).max()) * 2.0
        center = c1
        width = extent + cfg.start_margin
    else:
        c1, c2 = centroid(first), centroid(second)
        line = c2 - c1
        r_z = _wrap_half_turn(math.atan2(line[1], line[0]))
        g_mid = 0.5 * (goal_centroid(first) + goal_centroid(second))
        denom = float(line @ line)
        t = float(((g_mid - c1) @ line) / denom) if denom > 0 else 0.0
        t_c = min(max(t, 0.0), 1.0)
        clamped = t_c != t
        center = c1 + t_c * line
        width = float(np.linalg.norm(line)) + cfg.start_margin

    l_end = cfg.l_end
    width = max(width, l_end)
    action = GripperAction(float(center[0]), float(center[1]), float(center[2]), r_z, width, l_end)

    selected_ids = {id(first)} | ({id(second)} if second is not None else set())
    table = tuple(
        Region(r["branch"], r["index"], r["lo"], r["hi"], int(r["mask"].sum()), r["cost"], id(r) in selected_ids)
        for r in regions
    )
    return InitDetail(action, table, int(residual_mask.sum()), clamped, degenerate, goal_fallback)


def shape_based_init(current, goal, cfg: InitConfig = InitConfig()) -> GripperAction | None:
    """Grasp initialization from the shape difference; None when the
    current set already sits within tau_goal of the goal everywhere."""
    cur = current.points if isinstance(current, VoxelSet) else np.asarray(current, dtype=np.float64)
    gl = goal.points if isinstance(goal, VoxelSet) else np.asarray(goal, dtype=np.float64)
    return init_detail(cur, gl, cfg).action


@dataclass(frozen=True)
class PlannerConfig:
    init: InitConfig = InitConfig()
    samples: int = 24
    seed: int = 0
    optimizer: str = "sampling"
    fd_epsilon: float = 5e-4
    qn_maxiter: int = 12
    k: int = 300
    pinches: int = 5
    substeps: int = 8
    n_relax: int = 12
    sigma: tuple[float, float, float, float, float] = (0.01, 0.01, 0.005, 0.35, 0.005)
    weights: LossWeights = LossWeights()
    dcd_params: DcdParams = DCD_TRAIN
    bounds_lo: tuple[float, float, float] = (-0.08, -0.08, 0.004)
    bounds_hi: tuple[float, float, float] = (0.08, 0.08, 0.06)
    l_min: float | None = None
    l_max: float = 0.12

    def __post_init__(self):
        if self.optimizer not in ("sampling", "quasi_newton"):
            raise PlannerError(f"unknown optimizer {self.optimizer!r}")
        if self.samples < 0:
            raise PlannerError("samples must be >= 0")

    @property
    def min_width(self) -> float:
        if self.l_min is not None:
            return self.l_min
        return 2.0 * self.init.finger_radius + 0.004

    def step_params(self) -> StepParams:
        return StepParams(substeps=self.substeps, n_relax=self.n_relax)


@dataclass(frozen=True)
class Candidate:
    kind: str
    action: GripperAction
    loss: float | None
    note: str = ""


@dataclass(frozen=True)
class PlanResult:
    action: GripperAction
    predicted_loss: float
    predicted_scene: Scene
    init_action: GripperAction | None
    candidates: tuple[Candidate, ...]
    backend: str


def no_contact_action(scene: Scene, cfg: PlannerConfig) -> GripperAction:
    """Wide, high pinch that cannot touch the material."""
    pts = scene.plasticine.points
    c = pts.mean(axis=0)
    extent = float(np.linalg.norm(pts[:, :2] - c[None, :2], axis=1).max())
    radius = scene.fingers[0].radius
    width = 2.0 * (extent + 2.0 * radius + 0.02)
    z = float(pts[:, 2].max()) + scene.fingers[0].length / 2.0 + radius + 0.02
    return GripperAction(float(c[0]), float(c[1]), z, 0.0, width, width)


def random_action(rng: np.random.Generator, cfg: PlannerConfig) -> GripperAction:
    lo = np.asarray(cfg.bounds_lo)
    hi = np.asarray(cfg.bounds_hi)
    pos = lo + rng.random(3) * (hi - lo)
    r_z = float(rng.random() * math.pi)
    l_end = float(cfg.min_width + rng.random() * 0.02)
    l = float(l_end + 0.01 + rng.random() * 0.04)
    return GripperAction(float(pos[0]), float(pos[1]), float(pos[2]), r_z, l, l_end)


def _sanitize(cfg: PlannerConfig, x, y, z, r_z, l, l_end) -> GripperAction:
    lo, hi = cfg.bounds_lo, cfg.bounds_hi
    x = min(max(x, lo[0]), hi[0])
    y = min(max(y, lo[1]), hi[1])
    z = min(max(z, lo[2]), hi[2])
    l_end = min(max(l_end, cfg.min_width), cfg.l_max)
    l = min(max(l, l_end), cfg.l_max)
    return GripperAction(float(x), float(y), float(z), _wrap_half_turn(r_z), float(l), float(l_end))


def _sample_state(scene: Scene, goal: VoxelSet, cfg: PlannerConfig) -> tuple[VoxelSet, VoxelSet]:
    k = min(cfg.k, len(scene.plasticine), len(goal))
    cur = fps_downsample(scene.plasticine, k) if len(scene.plasticine) > k else scene.plasticine
    gl = fps_downsample(goal, k) if len(goal) > k else goal
    return cur, gl


def predicted_loss(scene: Scene, goal: VoxelSet, cfg: PlannerConfig) -> float:
    cur, gl = _sample_state(scene, goal, cfg)
    return metrics.total_loss(cur, gl, cfg.weights, cfg.dcd_params)


def _evaluate(scene: Scene, goal: VoxelSet, action: GripperAction, cfg: PlannerConfig):
    out = step(scene, action, cfg.step_params(), bounds=(cfg.bounds_lo, cfg.bounds_hi))
    return out, predicted_loss(out, goal, cfg)


def plan_pinch(scene: Scene, goal: VoxelSet, cfg: PlannerConfig = PlannerConfig(), seed_offset: int = 0) -> PlanResult:
    """Pick the next pinch for one step of the receding-horizon loop.

    The shape-based initialization seeds either a Gaussian candidate sweep
    or a quasi-Newton refinement; candidates are scored by rolling out the
    surrogate and measuring the weighted shape loss against the goal.
    """
    base = shape_based_init(fps_downsample(scene.plasticine, min(cfg.k, len(scene.plasticine))), goal, cfg.init)
    if base is None:
        base = no_contact_action(scene, cfg)
    return refine(scene, goal, base, cfg, seed_offset)


def refine(scene: Scene, goal: VoxelSet, init_action: GripperAction, cfg: PlannerConfig, seed_offset: int = 0) -> PlanResult:
    if cfg.optimizer == "quasi_newton":
        return _refine_quasi_newton(scene, goal, init_action, cfg)
    return _refine_sampling(scene, goal, init_action, cfg, seed_offset)


def _refine_sampling(scene: Scene, goal: VoxelSet, init_action: GripperAction, cfg: PlannerConfig, seed_offset: int) -> PlanResult:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed_offset)))
    actions: list[tuple[str, GripperAction]] = [("init", init_action)]
    sigma = np.asarray(cfg.sigma)
    for _ in range(cfg.samples):
        noise = rng.standard_normal(5) * sigma
        actions.append(
            (
                "perturb",
                _sanitize(
                    cfg,
                    init_action.x + noise[0],
                    init_action.y + noise[1],
                    init_action.z + noise[2],
                    init_action.r_z + noise[3],
                    init_action.l,
                    init_action.l_end + noise[4],
                ),
            )
        )

    candidates: list[Candidate] = []
    best = None
    for kind, action in actions:
        try:
            out, loss = _evaluate(scene, goal, action, cfg)
        except ActionRejected as exc:
            candidates.append(Candidate(kind, action, None, str(exc)))
            continue
        candidates.append(Candidate(kind, action, loss))
        if best is None or loss < best[1]:
            best = (action, loss, out)
    if best is None:
        notes = "; ".join(c.note for c in candidates if c.note)
        raise PlannerError(f"all {len(candidates)} candidates rejected: {notes}")
    return PlanResult(best[0], best[1], best[2], init_action, tuple(candidates), "sampling")


def _refine_quasi_newton(scene: Scene, goal: VoxelSet, init_action: GripperAction, cfg: PlannerConfig) -> PlanResult:
    candidates: list[Candidate] = []
    best: list = [None]

    def unpack(vec) -> GripperAction:
        return _sanitize(cfg, vec[0], vec[1], vec[2], vec[3], init_action.l, vec[4])

    def objective(vec) -> float:
        action = unpack(vec)
        try:
            out, loss = _evaluate(scene, goal, action, cfg)
        except ActionRejected as exc:
            candidates.append(Candidate("qn", action, None, str(exc)))
            return 10.0
        candidates.append(Candidate("qn", action, loss))
        if best[0] is None or loss < best[0][1]:
            best[0] = (action, loss, out)
        return loss

    x0 = np.array([init_action.x, init_action.y, init_action.z, init_action.r_z, init_action.l_end])
    bnds = [
        (cfg.bounds_lo[0], cfg.bounds_hi[0]),
        (cfg.bounds_lo[1], cfg.bounds_hi[1]),
        (cfg.bounds_lo[2], cfg.bounds_hi[2]),
        (0.0, math.pi),
        (cfg.min_width, cfg.l_max),
    ]
    objective(x0)
    minimize(
        objective,
        x0,
        method="L-BFGS-B",
        bounds=bnds,
        options={"maxiter": cfg.qn_maxiter, "eps": cfg.fd_epsilon},
    )
    if best[0] is None:
        raise PlannerError("quasi-Newton refinement found no feasible action")
    action, loss, out = best[0]
    return PlanResult(action, loss, out, init_action, tuple(candidates), "quasi_newton")


@dataclass(frozen=True)
class PinchRecord:
    action: GripperAction
    executed: bool
    predicted_loss: float
    candidates: tuple[Candidate, ...]


@dataclass
class EpisodeResult:
    records: list[PinchRecord] = field(default_factory=list)
    states: list[Scene] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def actions(self) -> list[GripperAction]:
        return [r.action for r in self.records]


def plan_episode(scene: Scene, goal: VoxelSet, cfg: PlannerConfig = PlannerConfig(), eval_dcd: DcdParams = metrics.DCD_EVAL) -> EpisodeResult:
    """Receding-horizon: plan, execute, re-observe, repeat.

    A planned pinch is only executed when its predicted loss beats the
    current one, so the reported loss curve never climbs. The curve is
    scored with the evaluation DCD parameters; candidate scoring inside
    plan_pinch uses the (smoother) training parameters.
    """

    def report(s: Scene) -> float:
        cur, gl = _sample_state(s, goal, cfg)
        return metrics.total_loss(cur, gl, cfg.weights, eval_dcd)

    result = EpisodeResult()
    result.states.append(scene)
    result.loss_curve.append(report(scene))
    current = scene
    for i in range(cfg.pinches):
        try:
            plan = plan_pinch(current, goal, cfg, seed_offset=i)
            now = predicted_loss(current, goal, cfg)
            execute = plan.predicted_loss < now
            if execute:
                current = step(current, plan.action, cfg.step_params(), bounds=(cfg.bounds_lo, cfg.bounds_hi))
            result.records.append(PinchRecord(plan.action, execute, plan.predicted_loss, plan.candidates))
            result.states.append(current)
            result.loss_curve.append(report(current))
        except (PlannerError, DynamicsError) as exc:
            result.error = f"pinch {i}: {exc}"
            break
    return result
