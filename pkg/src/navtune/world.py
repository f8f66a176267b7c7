"""Occupancy-grid worlds: cellular-automata generation, obstacle inflation,
simulated planar laser scans, and collision queries.

Grid convention: ``cells[iy, ix]`` with row ``iy=0`` at the *bottom* of the
world; the text file format stores row 0 at the top, so writers flip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .robot import Pose2D


class GenerationError(RuntimeError):
    """No traversable map found within the retry budget."""

    def __init__(self, message: str, last_seed: int):
        super().__init__(message)
        self.last_seed = last_seed


class InvalidPoseError(ValueError):
    """Query pose is out of bounds or inside an obstacle."""


@dataclass(frozen=True)
class OccupancyGrid:
    width: int
    height: int
    resolution: float
    cells: np.ndarray  # bool, shape (height, width)
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        cells = np.ascontiguousarray(self.cells, dtype=bool)
        if cells.shape != (self.height, self.width):
            raise ValueError(f"cells shape {cells.shape} != (height, width)")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    # --- geometry helpers -------------------------------------------------
    @property
    def world_width(self) -> float:
        return self.width * self.resolution

    @property
    def world_height(self) -> float:
        return self.height * self.resolution

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.resolution))
        iy = int(math.floor((y - self.origin[1]) / self.resolution))
        return ix, iy

    def center_of(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )

    def in_bounds_cell(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def in_bounds(self, x: float, y: float) -> bool:
        return (
            self.origin[0] <= x < self.origin[0] + self.world_width
            and self.origin[1] <= y < self.origin[1] + self.world_height
        )

    def occupied_at(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        if not self.in_bounds_cell(ix, iy):
            return False
        return bool(self.cells[iy, ix])


@dataclass(frozen=True)
class CostGrid:
    width: int
    height: int
    resolution: float
    cost: np.ndarray  # float64 in [0, 1]; 1 = lethal
    occupancy: np.ndarray  # source cells, kept for exact footprint checks
    origin: tuple[float, float] = (0.0, 0.0)
    distances: np.ndarray | None = None  # obstacle EDT in meters, if known

    def __post_init__(self) -> None:
        cost = np.ascontiguousarray(self.cost, dtype=np.float64)
        cost.flags.writeable = False
        object.__setattr__(self, "cost", cost)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.resolution))
        iy = int(math.floor((y - self.origin[1]) / self.resolution))
        return ix, iy

    def center_of(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )


@dataclass(frozen=True)
class ScanConfig:
    num_beams: int = 720
    angle_min: float = -0.75 * math.pi  # 270 degree field of view
    angle_max: float = 0.75 * math.pi
    max_range: float = 5.0
    noise_std: float = 0.0  # hook only; default off

    def __post_init__(self) -> None:
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.angle_max <= self.angle_min:
            raise ValueError("angle_max must exceed angle_min")


DEFAULT_SCAN = ScanConfig()


@dataclass(frozen=True)
class LaserScan:
    ranges: np.ndarray
    angle_min: float
    angle_max: float
    max_range: float

    def __post_init__(self) -> None:
        ranges = np.ascontiguousarray(self.ranges, dtype=np.float64)
        ranges.flags.writeable = False
        object.__setattr__(self, "ranges", ranges)

    @property
    def num_beams(self) -> int:
        return int(self.ranges.shape[0])


# --------------------------------------------------------------------------
# Cellular-automata generation
# --------------------------------------------------------------------------

DEFAULT_WIDTH = 30
DEFAULT_HEIGHT = 30
DEFAULT_RESOLUTION = 0.15


def start_cell(width: int, height: int) -> tuple[int, int]:
    # Deep enough into the map that the default inflation keep-out
    # (footprint + 0.30 m) does not swallow the start pocket.
    return width // 2, min(4, height - 2)


def goal_cell(width: int, height: int) -> tuple[int, int]:
    return width // 2, max(height - 5, 1)


def default_start_pose(grid: OccupancyGrid) -> Pose2D:
    x, y = grid.center_of(*start_cell(grid.width, grid.height))
    return Pose2D(x, y, math.pi / 2.0)  # facing the goal side


def default_goal_xy(grid: OccupancyGrid) -> tuple[float, float]:
    return grid.center_of(*goal_cell(grid.width, grid.height))


def _smooth_once(cells: np.ndarray) -> np.ndarray:
    # Majority rule over the 8-neighborhood plus self; out-of-bounds counts
    # occupied, which biases caves toward closed borders.
    padded = np.pad(cells.astype(np.int64), 1, mode="constant", constant_values=1)
    count = np.zeros_like(cells, dtype=np.int64)
    h, w = cells.shape
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            count += padded[dy : dy + h, dx : dx + w]
    return count >= 5


def _carve_rect(cells: np.ndarray, ix: int, iy: int, half_w: int, half_h: int) -> None:
    h, w = cells.shape
    x0, x1 = max(0, ix - half_w), min(w, ix + half_w + 1)
    y0, y1 = max(0, iy - half_h), min(h, iy + half_h + 1)
    cells[y0:y1, x0:x1] = False


def _connected(cells: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> bool:
    # 4-connected flood fill over free cells.
    free = ~cells
    labels, _ = ndimage.label(free, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    sx, sy = start
    gx, gy = goal
    return labels[sy, sx] != 0 and labels[sy, sx] == labels[gy, gx]


def generate_ca_world(
    seed: int,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    fill_prob: float = 0.35,
    smooth_iters: int = 4,
    *,
    resolution: float = DEFAULT_RESOLUTION,
    force_border: bool = True,
    carve: bool = True,
    max_retries: int = 25,
) -> OccupancyGrid:
    """Generate a cave-like obstacle course.

    Random fill at ``fill_prob``, then ``smooth_iters`` passes of the
    5-of-9 majority rule. A small clearing is carved around the start and
    goal cells; if they end up disconnected the whole map is regenerated
    with seed+1, up to ``max_retries`` attempts.
    """
    if not 0.0 <= fill_prob <= 1.0:
        raise ValueError("fill_prob must be in [0, 1]")
    if width < 3 or height < 3:
        raise ValueError("grid must be at least 3x3")

    last_seed = seed
    for attempt in range(max_retries):
        last_seed = seed + attempt
        rng = np.random.Generator(np.random.PCG64(last_seed))
        cells = rng.random((height, width)) < fill_prob
        for _ in range(smooth_iters):
            cells = _smooth_once(cells)
        if force_border:
            cells[0, :] = True
            cells[-1, :] = True
            cells[:, 0] = True
            cells[:, -1] = True
        if not carve:
            return OccupancyGrid(width, height, resolution, cells)
        s = start_cell(width, height)
        g = goal_cell(width, height)
        _carve_rect(cells, s[0], s[1], 3, 3)
        _carve_rect(cells, g[0], g[1], 3, 3)
        if force_border:
            cells[0, :] = True
            cells[-1, :] = True
            cells[:, 0] = True
            cells[:, -1] = True
        if _connected(cells, s, g):
            return OccupancyGrid(width, height, resolution, cells)
    raise GenerationError(
        f"no traversable map within {max_retries} attempts (last seed {last_seed})",
        last_seed=last_seed,
    )


# --------------------------------------------------------------------------
# Obstacle inflation
# --------------------------------------------------------------------------


def obstacle_distances(grid: OccupancyGrid) -> np.ndarray:
    """Center-to-center distance (meters) from every cell to the nearest
    occupied cell; 0 on occupied cells."""
    if not grid.cells.any():
        return np.full((grid.height, grid.width), np.inf)
    d = ndimage.distance_transform_edt(~grid.cells)
    return d * grid.resolution


def inflate(
    grid: OccupancyGrid,
    inflation_radius: float,
    decay: float = 1.0,
    *,
    robot_radius: float = 0.0,
    distances: np.ndarray | None = None,
) -> CostGrid:
    """Exponentially decayed obstacle cost.

    Occupied cells cost 1. A free cell at obstacle distance d within the
    inflation radius costs ``exp(-decay * (d - robot_radius))`` clipped to
    [0, 1]; beyond the radius the cost is 0. With ``robot_radius`` > 0 the
    clip produces a lethal (cost 1) band around obstacles, which is how the
    planner encodes its keep-out margin.
    """
    if inflation_radius < 0:
        raise ValueError("inflation_radius must be >= 0")
    d = obstacle_distances(grid) if distances is None else distances
    with np.errstate(over="ignore"):
        cost = np.exp(-decay * (d - robot_radius))
    cost = np.clip(cost, 0.0, 1.0)
    cost[d > inflation_radius] = 0.0
    cost[grid.cells] = 1.0
    return CostGrid(
        width=grid.width,
        height=grid.height,
        resolution=grid.resolution,
        cost=cost,
        occupancy=grid.cells,
        origin=grid.origin,
        distances=d,
    )


# --------------------------------------------------------------------------
# Laser scans
# --------------------------------------------------------------------------


def raycast(
    grid: OccupancyGrid,
    pose: Pose2D,
    config: ScanConfig = DEFAULT_SCAN,
    rng: np.random.Generator | None = None,
) -> LaserScan:
    """Simulate a planar scan by walking each beam through the grid.

    Beams are evenly spaced over [angle_min, angle_max] relative to the
    robot heading. Out-of-grid space counts as free; ranges clip to
    max_range. ``rng`` feeds the optional noise hook (off by default).
    """
    ix, iy = grid.cell_of(pose.x, pose.y)
    if not grid.in_bounds_cell(ix, iy):
        raise InvalidPoseError(f"pose ({pose.x:.3f}, {pose.y:.3f}) out of bounds")
    if grid.cells[iy, ix]:
        raise InvalidPoseError(f"pose ({pose.x:.3f}, {pose.y:.3f}) inside an obstacle")

    n = config.num_beams
    if n == 1:
        angles = np.array([pose.theta + config.angle_min])
    else:
        rel = np.linspace(config.angle_min, config.angle_max, n)
        angles = pose.theta + rel
    ranges = raycast_directions(grid, pose.x, pose.y, np.cos(angles), np.sin(angles), config.max_range)
    if config.noise_std > 0.0 and rng is not None:
        ranges = np.clip(ranges + rng.normal(0.0, config.noise_std, n), 1e-6, config.max_range)
    return LaserScan(ranges=ranges, angle_min=config.angle_min, angle_max=config.angle_max, max_range=config.max_range)


def raycast_directions(
    grid: OccupancyGrid,
    x: float,
    y: float,
    dx: np.ndarray,
    dy: np.ndarray,
    max_range: float,
) -> np.ndarray:
    """Vectorized grid traversal (Amanatides-Woo) for a batch of unit rays."""
    res = grid.resolution
    ox = (x - grid.origin[0]) / res
    oy = (y - grid.origin[1]) / res
    n = dx.shape[0]

    cx = np.full(n, int(math.floor(ox)), dtype=np.int64)
    cy = np.full(n, int(math.floor(oy)), dtype=np.int64)
    step_x = np.where(dx >= 0, 1, -1).astype(np.int64)
    step_y = np.where(dy >= 0, 1, -1).astype(np.int64)

    with np.errstate(divide="ignore"):
        inv_dx = np.where(dx != 0, 1.0 / dx, np.inf)
        inv_dy = np.where(dy != 0, 1.0 / dy, np.inf)
    # Parametric distance (in meters) to the next vertical / horizontal line.
    next_vx = np.where(dx >= 0, cx + 1 - ox, cx - ox)
    next_vy = np.where(dy >= 0, cy + 1 - oy, cy - oy)
    t_max_x = np.abs(np.where(dx != 0, next_vx * inv_dx, np.inf)) * res
    t_max_y = np.abs(np.where(dy != 0, next_vy * inv_dy, np.inf)) * res
    t_delta_x = np.abs(inv_dx) * res
    t_delta_y = np.abs(inv_dy) * res

    ranges = np.full(n, max_range)
    active = np.ones(n, dtype=bool)
    while active.any():
        go_x = t_max_x <= t_max_y
        t_hit = np.where(go_x, t_max_x, t_max_y)
        over = active & (t_hit > max_range)
        active &= ~over

        adv = active.copy()
        cx = np.where(adv & go_x, cx + step_x, cx)
        cy = np.where(adv & ~go_x, cy + step_y, cy)
        inside = adv & (cx >= 0) & (cx < grid.width) & (cy >= 0) & (cy < grid.height)
        hit = np.zeros(n, dtype=bool)
        if inside.any():
            hit[inside] = grid.cells[cy[inside], cx[inside]]
        hit &= adv
        ranges = np.where(hit, t_hit, ranges)
        active &= ~hit
        t_max_x = np.where(adv & go_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(adv & ~go_x, t_max_y + t_delta_y, t_max_y)
    return np.minimum(ranges, max_range)


# --------------------------------------------------------------------------
# Collision queries
# --------------------------------------------------------------------------


def is_collision(grid: OccupancyGrid, pose: Pose2D, footprint_radius: float) -> bool:
    """True iff the robot disc overlaps any occupied cell rectangle, or the
    pose center is outside the grid."""
    if not grid.in_bounds(pose.x, pose.y):
        return True
    mask = collision_mask(
        grid, np.array([pose.x]), np.array([pose.y]), footprint_radius, oob_collides=True
    )
    return bool(mask[0])


def collision_mask(
    grid: OccupancyGrid,
    xs: np.ndarray,
    ys: np.ndarray,
    footprint_radius: float,
    *,
    oob_collides: bool = True,
) -> np.ndarray:
    """Vectorized disc-vs-occupied-cell test for a batch of points."""
    return collision_mask_cells(
        grid.cells, grid.resolution, grid.origin, xs, ys, footprint_radius, oob_collides=oob_collides
    )


def collision_mask_cells(
    occ: np.ndarray,
    res: float,
    origin: tuple[float, float],
    xs: np.ndarray,
    ys: np.ndarray,
    footprint_radius: float,
    *,
    oob_collides: bool = True,
) -> np.ndarray:
    height, width = occ.shape
    half = 0.5 * res
    cx = np.floor((xs - origin[0]) / res).astype(np.int64)
    cy = np.floor((ys - origin[1]) / res).astype(np.int64)

    out = np.zeros(xs.shape[0], dtype=bool)
    oob = (cx < 0) | (cx >= width) | (cy < 0) | (cy >= height)
    if oob_collides:
        out |= oob

    reach = int(math.ceil(footprint_radius / res)) + 1
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            # Closest possible approach between a point inside cell (cx, cy)
            # and the rectangle of cell (cx+dj, cy+di).
            gap_x = max(abs(dj) - 1, 0) * res
            gap_y = max(abs(di) - 1, 0) * res
            if math.hypot(gap_x, gap_y) > footprint_radius:
                continue
            nx = cx + dj
            ny = cy + di
            valid = (nx >= 0) & (nx < width) & (ny >= 0) & (ny < height) & ~oob
            if not valid.any():
                continue
            occ_here = np.zeros_like(valid)
            occ_here[valid] = occ[ny[valid], nx[valid]]
            if not occ_here.any():
                continue
            # Rectangle of the neighbor cell in world units.
            rcx = (nx + 0.5) * res + origin[0]
            rcy = (ny + 0.5) * res + origin[1]
            ddx = np.maximum(np.abs(xs - rcx) - half, 0.0)
            ddy = np.maximum(np.abs(ys - rcy) - half, 0.0)
            dist2 = ddx * ddx + ddy * ddy
            out |= occ_here & (dist2 <= footprint_radius * footprint_radius)
    return out


# --------------------------------------------------------------------------
# Grid file format
# --------------------------------------------------------------------------


def dump_grid(grid: OccupancyGrid) -> str:
    """Text format: header ``grid <width> <height> <resolution>`` then one
    row of '.'/'#' per line, top row first."""
    lines = [f"grid {grid.width} {grid.height} {grid.resolution!r}"]
    for iy in range(grid.height - 1, -1, -1):
        lines.append("".join("#" if c else "." for c in grid.cells[iy]))
    return "\n".join(lines) + "\n"


def load_grid(text: str) -> OccupancyGrid:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("grid "):
        raise ValueError("missing grid header")
    parts = lines[0].split()
    if len(parts) != 4:
        raise ValueError(f"malformed grid header: {lines[0]!r}")
    width, height = int(parts[1]), int(parts[2])
    resolution = float(parts[3])
    rows = lines[1 : 1 + height]
    if len(rows) != height:
        raise ValueError(f"expected {height} rows, found {len(rows)}")
    cells = np.zeros((height, width), dtype=bool)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"row {r} has {len(row)} cells, expected {width}")
        if set(row) - {".", "#"}:
            raise ValueError(f"row {r} has invalid characters")
        cells[height - 1 - r] = [ch == "#" for ch in row]
    return OccupancyGrid(width, height, resolution, cells)


def save_grid(grid: OccupancyGrid, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dump_grid(grid))


def read_grid(path: str) -> OccupancyGrid:
    with open(path, "r", encoding="ascii") as fh:
        return load_grid(fh.read())
