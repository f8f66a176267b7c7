"""The parameterized navigation system: Dijkstra global planner plus a
trajectory-sampling local planner with eight tunable knobs, and the
rotate/back-up recovery behaviors.

Keep-out semantics: the planner builds its cost grid so that cells closer
than ``footprint + inflation_radius`` to an obstacle are lethal (cost 1),
with a graded tail beyond that for the obstacle-distance scoring term.
Raising ``inflation_radius`` therefore seals narrow gaps, which is the
failure mode corrections are recorded against.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .robot import (
    CONTROL_PERIOD,
    SIM_DT,
    Action,
    KinematicLimits,
    Pose2D,
    RobotState,
)
from .world import CostGrid, OccupancyGrid, collision_mask_cells, inflate

FOOTPRINT_RADIUS = 0.12
# Rollouts assume the sampled velocity instantly; execution ramps to it over
# the control period, deviating by up to ~1 cm. Planning with a padded
# footprint keeps that deviation from eating the clearance.
PLANNING_PADDING = 0.02
COST_DECAY = 3.0
COST_TAIL = 0.30  # graded (non-lethal) cost band beyond the keep-out, meters
HORIZON = 1.5  # trajectory rollout length, seconds
GLOBAL_COST_WEIGHT = 5.0  # kappa in edge cost = len * (1 + kappa * avg cell cost)
LOOKAHEAD = 1.8
INFEASIBLE_BEFORE_RECOVERY = 5
ROTATE_TICKS = 10  # control ticks (1.0 s) of rotate-in-place
BACKUP_TICKS = 5  # control ticks (0.5 s) of backing up
LETHAL = 1.0

_ROLLOUT_STEPS = int(round(HORIZON / SIM_DT))


class NoPathError(RuntimeError):
    """Global planner could not connect start and goal."""


# --------------------------------------------------------------------------
# Parameter space
# --------------------------------------------------------------------------

KNOB_NAMES = (
    "max_vel_x",
    "max_vel_theta",
    "vx_samples",
    "vtheta_samples",
    "occdist_scale",
    "pdist_scale",
    "gdist_scale",
    "inflation_radius",
)


@dataclass(frozen=True)
class ParameterSet:
    max_vel_x: float
    max_vel_theta: float
    vx_samples: int
    vtheta_samples: int
    occdist_scale: float
    pdist_scale: float
    gdist_scale: float
    inflation_radius: float

    def __post_init__(self) -> None:
        if self.vx_samples < 1 or self.vtheta_samples < 1:
            raise ValueError("sample counts must be >= 1")
        object.__setattr__(self, "vx_samples", int(self.vx_samples))
        object.__setattr__(self, "vtheta_samples", int(self.vtheta_samples))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in KNOB_NAMES], dtype=np.float64)

    def to_text(self) -> str:
        lines = []
        for name in KNOB_NAMES:
            value = getattr(self, name)
            lines.append(f"{name}={value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ParameterSet":
        values: dict[str, float] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in KNOB_NAMES:
                raise ValueError(f"unknown parameter {key!r}")
            values[key] = float(raw.strip())
        missing = [n for n in KNOB_NAMES if n not in values]
        if missing:
            raise ValueError(f"missing parameters: {', '.join(missing)}")
        return cls(
            max_vel_x=values["max_vel_x"],
            max_vel_theta=values["max_vel_theta"],
            vx_samples=int(round(values["vx_samples"])),
            vtheta_samples=int(round(values["vtheta_samples"])),
            occdist_scale=values["occdist_scale"],
            pdist_scale=values["pdist_scale"],
            gdist_scale=values["gdist_scale"],
            inflation_radius=values["inflation_radius"],
        )

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ParameterSet":
        return cls(
            max_vel_x=float(values[0]),
            max_vel_theta=float(values[1]),
            vx_samples=int(round(values[2])),
            vtheta_samples=int(round(values[3])),
            occdist_scale=float(values[4]),
            pdist_scale=float(values[5]),
            gdist_scale=float(values[6]),
            inflation_radius=float(values[7]),
        )


DEFAULT_PARAMETERS = ParameterSet(0.50, 1.57, 6, 20, 0.10, 0.75, 1.00, 0.30)

INTEGRAL_KNOBS = (False, False, True, True, False, False, False, False)


@dataclass(frozen=True)
class ParameterSpace:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    integral: tuple[bool, ...] = INTEGRAL_KNOBS

    def __post_init__(self) -> None:
        if len(self.lower) != len(KNOB_NAMES) or len(self.upper) != len(KNOB_NAMES):
            raise ValueError("bounds must cover all knobs")
        for lo, hi in zip(self.lower, self.upper):
            if not lo < hi:
                raise ValueError("each lower bound must be below its upper bound")

    @property
    def dim(self) -> int:
        return len(KNOB_NAMES)

    def contains(self, params: ParameterSet) -> bool:
        values = params.as_array()
        return bool(np.all(values >= np.array(self.lower)) and np.all(values <= np.array(self.upper)))

    def encode(self, params: ParameterSet) -> np.ndarray:
        lo = np.array(self.lower)
        hi = np.array(self.upper)
        return (params.as_array() - lo) / (hi - lo)

    def decode(self, z: np.ndarray) -> ParameterSet:
        lo = np.array(self.lower)
        hi = np.array(self.upper)
        values = lo + np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0) * (hi - lo)
        for i, is_int in enumerate(self.integral):
            if is_int:
                values[i] = min(max(math.floor(values[i] + 0.5), lo[i]), hi[i])
        return ParameterSet.from_array(values)


DEFAULT_SPACE = ParameterSpace(
    lower=(0.1, 0.3, 1, 1, 0.0, 0.0, 0.0, 0.01),
    upper=(2.0, 3.2, 20, 40, 2.0, 2.0, 2.0, 0.60),
)


# --------------------------------------------------------------------------
# Planner input and cost grid construction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlannerInput:
    state: RobotState
    scan: object | None
    global_path: np.ndarray  # (N, 2) waypoints in world coordinates
    local_goal: tuple[float, float]
    goal: tuple[float, float]


@dataclass(frozen=True)
class Path:
    waypoints: np.ndarray  # (N, 2) cell centers, start first
    cost: float


def planner_cost_grid(
    grid: OccupancyGrid,
    inflation_radius: float,
    *,
    footprint_radius: float = FOOTPRINT_RADIUS,
    distances: np.ndarray | None = None,
) -> CostGrid:
    """Local-planner cost grid: lethal out to footprint + inflation_radius,
    graded tail beyond for the obstacle scoring term. Raising the inflation
    knob seals narrow gaps against trajectory rollouts."""
    keep_out = footprint_radius + inflation_radius
    return inflate(
        grid,
        inflation_radius=keep_out + COST_TAIL,
        decay=COST_DECAY,
        robot_radius=keep_out,
        distances=distances,
    )


def global_cost_grid(
    grid: OccupancyGrid,
    inflation_radius: float,
    *,
    footprint_radius: float = FOOTPRINT_RADIUS,
    distances: np.ndarray | None = None,
) -> CostGrid:
    """Global-planner cost grid: only physically impassable cells (within
    the footprint of an obstacle) are lethal; the inflation knob shapes the
    graded cost, steering routes wide of obstacles without sealing gaps.
    The robot therefore still approaches a too-narrow gap and fails there,
    locally, which is where corrections get recorded."""
    return inflate(
        grid,
        inflation_radius=footprint_radius + inflation_radius + COST_TAIL,
        decay=COST_DECAY,
        robot_radius=footprint_radius,
        distances=distances,
    )


class NavContext:
    """Per-environment planning caches.

    Only one cost grid exists per inflation radius (the map has N+1 entries
    at deployment), so both the grid and its goal-rooted field are memoized
    by radius.
    """

    def __init__(
        self,
        grid: OccupancyGrid,
        limits: KinematicLimits | None = None,
        footprint_radius: float = FOOTPRINT_RADIUS,
    ):
        from .robot import DEFAULT_LIMITS
        from .world import obstacle_distances

        self.grid = grid
        self.limits = limits if limits is not None else DEFAULT_LIMITS
        self.footprint_radius = footprint_radius
        self.planning_footprint = footprint_radius + PLANNING_PADDING
        self._distances = obstacle_distances(grid)
        self._cost_grids: dict[float, CostGrid] = {}
        self._global_grids: dict[float, CostGrid] = {}
        self._fields: dict[tuple[float, tuple[float, float]], "GoalField"] = {}

    def cost_grid(self, inflation_radius: float) -> CostGrid:
        key = float(inflation_radius)
        if key not in self._cost_grids:
            self._cost_grids[key] = planner_cost_grid(
                self.grid,
                key,
                footprint_radius=self.footprint_radius,
                distances=self._distances,
            )
        return self._cost_grids[key]

    def global_grid(self, inflation_radius: float) -> CostGrid:
        key = float(inflation_radius)
        if key not in self._global_grids:
            self._global_grids[key] = global_cost_grid(
                self.grid,
                key,
                footprint_radius=self.footprint_radius,
                distances=self._distances,
            )
        return self._global_grids[key]

    def goal_field(self, inflation_radius: float, goal: tuple[float, float]) -> "GoalField":
        key = (float(inflation_radius), (float(goal[0]), float(goal[1])))
        if key not in self._fields:
            self._fields[key] = GoalField(self.global_grid(inflation_radius), goal)
        return self._fields[key]


# --------------------------------------------------------------------------
# Global planner
# --------------------------------------------------------------------------

_NEIGHBORS = tuple(
    (dx, dy, math.hypot(dx, dy))
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    if (dx, dy) != (0, 0)
)


def plan_global(
    cost_grid: CostGrid, start: tuple[float, float], goal: tuple[float, float]
) -> Path:
    """Minimum-cost 8-connected path; edge cost is step length times
    ``1 + kappa * average endpoint cell cost``. Ties break on (cost, cell index)."""
    res = cost_grid.resolution
    width, height = cost_grid.width, cost_grid.height
    cost = cost_grid.cost
    sx, sy = cost_grid.cell_of(*start)
    gx, gy = cost_grid.cell_of(*goal)
    for name, (cx, cy) in (("start", (sx, sy)), ("goal", (gx, gy))):
        if not (0 <= cx < width and 0 <= cy < height):
            raise NoPathError(f"{name} cell ({cx}, {cy}) out of bounds")
        if cost[cy, cx] >= LETHAL:
            raise NoPathError(f"{name} cell ({cx}, {cy}) is lethal")

    start_id = sy * width + sx
    goal_id = gy * width + gx
    dist = np.full(width * height, np.inf)
    parent = np.full(width * height, -1, dtype=np.int64)
    dist[start_id] = 0.0
    heap: list[tuple[float, int]] = [(0.0, start_id)]
    while heap:
        d, cid = heapq.heappop(heap)
        if d > dist[cid]:
            continue
        if cid == goal_id:
            break
        cx, cy = cid % width, cid // width
        c_here = cost[cy, cx]
        for dx, dy, step_len in _NEIGHBORS:
            nx, ny = cx + dx, cy + dy
            if not (0 <= nx < width and 0 <= ny < height):
                continue
            c_there = cost[ny, nx]
            if c_there >= LETHAL:
                continue
            edge = step_len * res * (1.0 + GLOBAL_COST_WEIGHT * 0.5 * (c_here + c_there))
            nid = ny * width + nx
            nd = d + edge
            if nd < dist[nid]:
                dist[nid] = nd
                parent[nid] = cid
                heapq.heappush(heap, (nd, nid))
    if not np.isfinite(dist[goal_id]):
        raise NoPathError(f"goal cell ({gx}, {gy}) unreachable")

    chain = [goal_id]
    while chain[-1] != start_id:
        chain.append(int(parent[chain[-1]]))
    chain.reverse()
    pts = np.array([cost_grid.center_of(cid % width, cid // width) for cid in chain])
    return Path(waypoints=pts, cost=float(dist[goal_id]))


class GoalField:
    """Goal-rooted Dijkstra over the same edge costs as ``plan_global``;
    yields a cost-equal path from any cell in O(path length)."""

    def __init__(self, cost_grid: CostGrid, goal: tuple[float, float]):
        self.cost_grid = cost_grid
        width, height = cost_grid.width, cost_grid.height
        res = cost_grid.resolution
        cost = cost_grid.cost
        gx, gy = cost_grid.cell_of(*goal)
        self.goal_cell = (gx, gy)
        dist = np.full(width * height, np.inf)
        parent = np.full(width * height, -1, dtype=np.int64)
        if 0 <= gx < width and 0 <= gy < height and cost[gy, gx] < LETHAL:
            goal_id = gy * width + gx
            dist[goal_id] = 0.0
            heap: list[tuple[float, int]] = [(0.0, goal_id)]
            while heap:
                d, cid = heapq.heappop(heap)
                if d > dist[cid]:
                    continue
                cx, cy = cid % width, cid // width
                c_here = cost[cy, cx]
                for dx, dy, step_len in _NEIGHBORS:
                    nx, ny = cx + dx, cy + dy
                    if not (0 <= nx < width and 0 <= ny < height):
                        continue
                    c_there = cost[ny, nx]
                    if c_there >= LETHAL:
                        continue
                    edge = step_len * res * (1.0 + GLOBAL_COST_WEIGHT * 0.5 * (c_here + c_there))
                    nid = ny * width + nx
                    nd = d + edge
                    if nd < dist[nid]:
                        dist[nid] = nd
                        parent[nid] = cid
                        heapq.heappush(heap, (nd, nid))
        self.dist = dist
        self.parent = parent

    def path_from(self, x: float, y: float) -> Path | None:
        grid = self.cost_grid
        cx, cy = grid.cell_of(x, y)
        if not (0 <= cx < grid.width and 0 <= cy < grid.height):
            return None
        cid = cy * grid.width + cx
        if not np.isfinite(self.dist[cid]):
            return None
        chain = [cid]
        while self.parent[chain[-1]] >= 0:
            chain.append(int(self.parent[chain[-1]]))
        pts = np.array([grid.center_of(c % grid.width, c // grid.width) for c in chain])
        return Path(waypoints=pts, cost=float(self.dist[cid]))


# --------------------------------------------------------------------------
# Local planner
# --------------------------------------------------------------------------


def local_goal(path: Path, pose: Pose2D, lookahead: float = LOOKAHEAD) -> tuple[float, float]:
    """First path point at arc distance >= lookahead from the path point
    nearest the pose; the path end if none is far enough."""
    pts = path.waypoints
    if pts.shape[0] == 0:
        raise ValueError("empty path")
    d2 = (pts[:, 0] - pose.x) ** 2 + (pts[:, 1] - pose.y) ** 2
    i0 = int(np.argmin(d2))
    arc = 0.0
    for i in range(i0 + 1, pts.shape[0]):
        arc += float(np.hypot(pts[i, 0] - pts[i - 1, 0], pts[i, 1] - pts[i - 1, 1]))
        if arc >= lookahead:
            return (float(pts[i, 0]), float(pts[i, 1]))
    return (float(pts[-1, 0]), float(pts[-1, 1]))


def sample_window(
    theta: ParameterSet, vel: Action, limits: KinematicLimits
) -> tuple[np.ndarray, np.ndarray]:
    """Velocity pairs reachable within one control period, capped by the
    parameter set. Forward-only v from 0 to the reachable max; w symmetric
    about zero. Sample index = iv * vtheta_samples + iw."""
    v_hi = min(theta.max_vel_x, limits.max_v, vel.v + limits.max_acc_v * CONTROL_PERIOD)
    v_hi = max(v_hi, 0.0)
    w_hi = min(theta.max_vel_theta, limits.max_w, abs(vel.w) + limits.max_acc_w * CONTROL_PERIOD)
    # A single sample degenerates the span; keep it useful.
    vs = np.array([v_hi]) if theta.vx_samples == 1 else np.linspace(0.0, v_hi, theta.vx_samples)
    ws = np.array([0.0]) if theta.vtheta_samples == 1 else np.linspace(-w_hi, w_hi, theta.vtheta_samples)
    v_grid = np.repeat(vs, ws.shape[0])
    w_grid = np.tile(ws, vs.shape[0])
    return v_grid, w_grid


def rollout_poses(
    pose: Pose2D, v: np.ndarray, w: np.ndarray, steps: int = _ROLLOUT_STEPS, dt: float = SIM_DT
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form constant-velocity arcs: (steps, n) arrays of x, y, theta
    after 1..steps timesteps."""
    k = np.arange(1, steps + 1, dtype=np.float64)[:, None]
    th = pose.theta + w[None, :] * dt * k
    straight = np.abs(w) < 1e-6
    w_safe = np.where(straight, 1.0, w)
    radius = v / w_safe
    xs_arc = pose.x + radius[None, :] * (np.sin(th) - math.sin(pose.theta))
    ys_arc = pose.y - radius[None, :] * (np.cos(th) - math.cos(pose.theta))
    xs_str = pose.x + v[None, :] * math.cos(pose.theta) * dt * k
    ys_str = pose.y + v[None, :] * math.sin(pose.theta) * dt * k
    xs = np.where(straight[None, :], xs_str, xs_arc)
    ys = np.where(straight[None, :], ys_str, ys_arc)
    return xs, ys, th


def _point_to_path_distance(px: np.ndarray, py: np.ndarray, waypoints: np.ndarray) -> np.ndarray:
    """Min distance from each point to the path polyline."""
    if waypoints.shape[0] == 1:
        return np.hypot(px - waypoints[0, 0], py - waypoints[0, 1])
    a = waypoints[:-1]
    b = waypoints[1:]
    ab = b - a  # (m, 2)
    ab2 = np.maximum((ab ** 2).sum(axis=1), 1e-12)
    apx = px[:, None] - a[None, :, 0]
    apy = py[:, None] - a[None, :, 1]
    t = np.clip((apx * ab[None, :, 0] + apy * ab[None, :, 1]) / ab2[None, :], 0.0, 1.0)
    dx = apx - t * ab[None, :, 0]
    dy = apy - t * ab[None, :, 1]
    return np.sqrt((dx * dx + dy * dy).min(axis=1))


def dwa_plan(
    x: PlannerInput,
    theta: ParameterSet,
    cost_grid: CostGrid,
    limits: KinematicLimits,
    *,
    footprint_radius: float = FOOTPRINT_RADIUS,
) -> Action | None:
    """Sample the dynamic window, roll each pair out for the horizon, drop
    trajectories that leave the grid, enter lethal cost, or overlap an
    obstacle, and return the lowest-scoring remainder (ties: lowest sample
    index). Returns None when every trajectory is discarded."""
    action, _ = dwa_plan_details(x, theta, cost_grid, limits, footprint_radius=footprint_radius)
    return action


def dwa_plan_details(
    x: PlannerInput,
    theta: ParameterSet,
    cost_grid: CostGrid,
    limits: KinematicLimits,
    *,
    footprint_radius: float = FOOTPRINT_RADIUS,
) -> tuple[Action | None, dict]:
    """As ``dwa_plan`` but also returns per-sample scoring arrays."""
    if x.global_path is None or len(x.global_path) == 0:
        raise ValueError("planner input has an empty global path")
    v, w = sample_window(theta, x.state.vel, limits)
    n = v.shape[0]
    xs, ys, _ = rollout_poses(x.state.pose, v, w)
    steps = xs.shape[0]

    grid = cost_grid
    res = grid.resolution
    cx = np.floor((xs - grid.origin[0]) / res).astype(np.int64)
    cy = np.floor((ys - grid.origin[1]) / res).astype(np.int64)
    inside = (cx >= 0) & (cx < grid.width) & (cy >= 0) & (cy < grid.height)
    cell_cost = np.full((steps, n), np.inf)
    if inside.any():
        cell_cost[inside] = grid.cost[cy[inside], cx[inside]]

    feasible = inside.all(axis=0) & (cell_cost < LETHAL).all(axis=0)
    if feasible.any():
        idx = np.nonzero(feasible)[0]
        sub_x = xs[:, idx]
        sub_y = ys[:, idx]
        if grid.distances is not None:
            # Only poses whose cell sits within footprint + cell diagonal of
            # an obstacle can possibly overlap one; skip the rest.
            d_cells = grid.distances[cy[:, idx], cx[:, idx]]
            suspect = d_cells <= footprint_radius + res * math.sqrt(2.0)
        else:
            suspect = np.ones_like(sub_x, dtype=bool)
        if suspect.any():
            hits = collision_mask_cells(
                grid.occupancy, res, grid.origin, sub_x[suspect], sub_y[suspect], footprint_radius
            )
            if hits.any():
                sample_of = np.broadcast_to(np.arange(idx.shape[0]), suspect.shape)[suspect]
                bad = np.zeros(idx.shape[0], dtype=bool)
                np.logical_or.at(bad, sample_of[hits], True)
                feasible[idx[bad]] = False

    c_occ = np.where(np.isfinite(cell_cost), cell_cost, 0.0).max(axis=0)
    d_goal = np.hypot(xs[-1] - x.local_goal[0], ys[-1] - x.local_goal[1])
    d_path = _point_to_path_distance(xs[-1], ys[-1], np.asarray(x.global_path, dtype=np.float64))
    score = (
        theta.pdist_scale * d_path
        + theta.gdist_scale * d_goal
        + theta.occdist_scale * c_occ
    )
    score = np.where(feasible, score, np.inf)
    details = {
        "v": v,
        "w": w,
        "feasible": feasible,
        "score": score,
        "c_occ": c_occ,
        "d_goal": d_goal,
        "d_path": d_path,
        "end_x": xs[-1],
        "end_y": ys[-1],
        "best": None,
    }
    if not feasible.any():
        return None, details
    best = int(np.argmin(score))
    details["best"] = best
    return Action(float(v[best]), float(w[best])), details


# --------------------------------------------------------------------------
# Recovery behaviors
# --------------------------------------------------------------------------


class RecoveryPhase(enum.Enum):
    ROTATE = "rotate"
    BACKUP = "backup"


def recovery_action(phase: RecoveryPhase, theta: ParameterSet) -> Action:
    if phase is RecoveryPhase.ROTATE:
        return Action(0.0, 0.8 * theta.max_vel_theta)
    return Action(-0.1 * theta.max_vel_x, 0.0)


def _backup_blocked(
    pose: Pose2D, cost_grid: CostGrid, footprint_radius: float, clearance: float = 0.1
) -> bool:
    """Backing up is blind; refuse it when the swept strip behind the robot
    overlaps an obstacle."""
    offsets = np.linspace(0.0, clearance, 4)
    xs = pose.x - offsets * math.cos(pose.theta)
    ys = pose.y - offsets * math.sin(pose.theta)
    return bool(
        collision_mask_cells(
            cost_grid.occupancy, cost_grid.resolution, cost_grid.origin, xs, ys, footprint_radius
        ).any()
    )


def recovery_phase_at(tick: int) -> RecoveryPhase:
    """Phase for the given control tick since recovery began: 1 s of
    rotating in place, then 0.5 s of backing up, cycling."""
    cycle = tick % (ROTATE_TICKS + BACKUP_TICKS)
    return RecoveryPhase.ROTATE if cycle < ROTATE_TICKS else RecoveryPhase.BACKUP


@dataclass(frozen=True)
class ControllerState:
    infeasible_streak: int = 0
    recovering: bool = False
    recovery_tick: int = 0


def control_step(
    x: PlannerInput,
    theta: ParameterSet,
    cost_grid: CostGrid,
    limits: KinematicLimits,
    cs: ControllerState,
    *,
    footprint_radius: float = FOOTPRINT_RADIUS,
) -> tuple[Action, ControllerState, bool]:
    """One planner tick with recovery fallback. Returns (action, new
    controller state, feasible flag)."""
    action = None
    if x.global_path is not None and len(x.global_path) > 0:
        action = dwa_plan(x, theta, cost_grid, limits, footprint_radius=footprint_radius)
    if action is not None:
        return action, ControllerState(), True
    streak = cs.infeasible_streak + 1
    if cs.recovering:
        phase = recovery_phase_at(cs.recovery_tick)
        action = recovery_action(phase, theta)
        if phase is RecoveryPhase.BACKUP and _backup_blocked(
            x.state.pose, cost_grid, footprint_radius
        ):
            action = recovery_action(RecoveryPhase.ROTATE, theta)
        return action, replace(cs, infeasible_streak=streak, recovery_tick=cs.recovery_tick + 1), False
    if streak >= INFEASIBLE_BEFORE_RECOVERY:
        action = recovery_action(recovery_phase_at(0), theta)
        return action, ControllerState(streak, True, 1), False
    return Action(0.0, 0.0), replace(cs, infeasible_streak=streak), False
