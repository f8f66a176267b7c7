"""Benchmark harness: procedurally generated obstacle-course suites, the
seven planner variants, repeated seeded trials, and the pairwise
significance matrix over traversal times.

Runs that get stuck, time out, or collide score the timeout value. Each
run's seed jitters the start pose slightly so per-cell samples carry
variance for the t-test.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .context import ClassifierConfig
from .expert import ExpertSpec, scripted_intervention
from .intervention import InterventionRecord, InterventionType
from .learn import FIT_CMA_DEFAULTS, CmaConfig
from .nav import DEFAULT_PARAMETERS, NavContext, ParameterSet
from .pipeline import (
    DEFAULT_TIMEOUT,
    PredictorConfig,
    TrainedPolicy,
    dump_policy,
    load_policy,
    run_episode,
    train,
)
from .robot import Pose2D
from .stats import DegenerateSamplesError, welch_t
from .world import (
    OccupancyGrid,
    default_goal_xy,
    default_start_pose,
    dump_grid,
    generate_ca_world,
    load_grid,
)

# --------------------------------------------------------------------------
# Variants
# --------------------------------------------------------------------------

SUBSET_A = (InterventionType.TYPE_A,)
SUBSET_AB = (InterventionType.TYPE_A, InterventionType.TYPE_B)
SUBSET_ABD = (InterventionType.TYPE_A, InterventionType.TYPE_B, InterventionType.DEMO)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    subset: tuple[InterventionType, ...] | None  # None = default parameters only
    use_confidence: bool = True

    def __post_init__(self) -> None:
        if self.subset is not None and not self.subset:
            raise ValueError("an intervention subset must not be empty")


STANDARD_VARIANTS = (
    VariantSpec("default", None),
    VariantSpec("A", SUBSET_A, use_confidence=False),
    VariantSpec("A+c", SUBSET_A, use_confidence=True),
    VariantSpec("A+B", SUBSET_AB, use_confidence=False),
    VariantSpec("A+B+c", SUBSET_AB, use_confidence=True),
    VariantSpec("A+B+D", SUBSET_ABD, use_confidence=False),
    VariantSpec("A+B+D+c", SUBSET_ABD, use_confidence=True),
)


# --------------------------------------------------------------------------
# Suite generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DifficultyBand:
    name: str
    fill_prob: float
    pinch_gap: int = 0  # cells; > 0 superimposes a wall with this gap


DESK_BANDS = (
    DifficultyBand("easy", fill_prob=0.36),
    DifficultyBand("medium", fill_prob=0.41),
    DifficultyBand("pinch", fill_prob=0.30, pinch_gap=3),
)


@dataclass(frozen=True)
class SuiteEnv:
    name: str
    grid: OccupancyGrid
    meta: dict


def _superimpose_pinch(grid: OccupancyGrid, gap_cells: int, rng: np.random.Generator) -> OccupancyGrid | None:
    """Full-width wall with a narrow gap, keeping start and goal connected."""
    from scipy import ndimage

    cells = grid.cells.copy()
    row = int(rng.integers(grid.height // 2 - 4, grid.height // 2 + 5))
    col = int(rng.integers(5, grid.width - 5 - gap_cells))
    cells[row, :] = True
    cells[row, col : col + gap_cells] = False
    # Clear the approach so the gap itself stays traversable.
    cells[row - 2 : row, col - 1 : col + gap_cells + 1] = False
    cells[row + 1 : row + 3, col - 1 : col + gap_cells + 1] = False
    cells[row, col : col + gap_cells] = False
    from .world import start_cell, goal_cell

    free = ~cells
    labels, _ = ndimage.label(free, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    s = start_cell(grid.width, grid.height)
    g = goal_cell(grid.width, grid.height)
    if labels[s[1], s[0]] == 0 or labels[s[1], s[0]] != labels[g[1], g[0]]:
        return None
    return OccupancyGrid(grid.width, grid.height, grid.resolution, cells, grid.origin)


def generate_suite(
    n_envs: int,
    seed: int,
    bands: tuple[DifficultyBand, ...] = DESK_BANDS,
    *,
    width: int = 30,
    height: int = 30,
) -> list[SuiteEnv]:
    """Deterministic environment set sweeping the difficulty bands."""
    if n_envs < 1:
        raise ValueError("need at least one environment")
    envs: list[SuiteEnv] = []
    for i in range(n_envs):
        band = bands[i * len(bands) // n_envs]
        env_seed = seed + 101 * i
        attempt = 0
        while True:
            grid = generate_ca_world(
                env_seed + attempt, width, height, fill_prob=band.fill_prob, smooth_iters=4
            )
            if band.pinch_gap > 0:
                rng = np.random.Generator(np.random.PCG64(env_seed + attempt))
                pinched = _superimpose_pinch(grid, band.pinch_gap, rng)
                if pinched is None:
                    attempt += 1
                    if attempt > 50:
                        raise RuntimeError(f"could not pinch environment {i}")
                    continue
                grid = pinched
            break
        envs.append(
            SuiteEnv(
                name=f"env{i:03d}_{band.name}",
                grid=grid,
                meta={
                    "band": band.name,
                    "fill_prob": band.fill_prob,
                    "pinch_gap": band.pinch_gap,
                    "seed": env_seed + attempt,
                },
            )
        )
    return envs


def save_suite(envs: list[SuiteEnv], directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = []
    for env in envs:
        fname = f"{env.name}.grid"
        with open(os.path.join(directory, fname), "w", encoding="ascii") as fh:
            fh.write(dump_grid(env.grid))
        manifest.append({"name": env.name, "file": fname, **env.meta})
    with open(os.path.join(directory, "suite.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_suite(directory: str) -> list[SuiteEnv]:
    with open(os.path.join(directory, "suite.json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    envs = []
    for row in manifest:
        with open(os.path.join(directory, row["file"]), "r", encoding="ascii") as fh:
            grid = load_grid(fh.read())
        meta = {k: v for k, v in row.items() if k not in ("name", "file")}
        envs.append(SuiteEnv(name=row["name"], grid=grid, meta=meta))
    return envs


# --------------------------------------------------------------------------
# Scripted training data (shared across all variants)
# --------------------------------------------------------------------------


def _open_room(width=30, height=30, res=0.15) -> OccupancyGrid:
    cells = np.zeros((height, width), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    return OccupancyGrid(width, height, res, cells)


def _gap_room(gap_cells: int, gap_col: int, width=30, height=30, res=0.15) -> OccupancyGrid:
    grid = _open_room(width, height, res)
    cells = grid.cells.copy()
    row = height // 2
    cells[row, :] = True
    cells[row, gap_col : gap_col + gap_cells] = False
    return OccupancyGrid(width, height, res, cells)


def _corner_room(width=30, height=30, res=0.15) -> OccupancyGrid:
    # Wide L-shaped corridor: up the left side, then across the top.
    cells = np.ones((height, width), dtype=bool)
    cells[1 : height - 1, 2:9] = False  # vertical leg
    cells[height - 9 : height - 1, 2 : width - 1] = False  # horizontal leg
    return OccupancyGrid(width, height, res, cells)


@dataclass
class TrainingData:
    records: list[InterventionRecord]
    envs: list[OccupancyGrid]

    def subset(self, types: tuple[InterventionType, ...]) -> tuple[list[InterventionRecord], list[OccupancyGrid]]:
        pairs = [(r, e) for r, e in zip(self.records, self.envs) if r.itype in types]
        return [p[0] for p in pairs], [p[1] for p in pairs]


def build_training_data(seed: int = 0) -> TrainingData:
    """Two failure corrections, two slow/awkward-behavior corrections, and
    two plain demonstrations, produced by scripted experts on dedicated
    training courses."""
    gap_a1 = _gap_room(gap_cells=3, gap_col=14)
    gap_a2 = _gap_room(gap_cells=4, gap_col=8)
    open_room = _open_room()
    corner = _corner_room()
    demo1 = generate_ca_world(seed + 17, fill_prob=0.36)
    demo2 = generate_ca_world(seed + 31, fill_prob=0.40)

    corner_start = Pose2D(*corner.center_of(5, 4), math.pi / 2)
    corner_goal = corner.center_of(corner.width - 5, corner.height - 5)
    specs = [
        (
            gap_a1,
            ExpertSpec(
                theta=replace(DEFAULT_PARAMETERS, inflation_radius=0.05, max_vel_x=0.25),
                itype=InterventionType.TYPE_A,
                region=(0.0, 1.4, 4.5, 3.2),
                max_steps=30,
            ),
            None,
            None,
        ),
        (
            gap_a2,
            ExpertSpec(
                theta=replace(DEFAULT_PARAMETERS, inflation_radius=0.08, max_vel_x=0.22, vtheta_samples=30),
                itype=InterventionType.TYPE_A,
                region=(0.0, 1.4, 4.5, 3.2),
                max_steps=30,
            ),
            None,
            None,
        ),
        (
            open_room,
            ExpertSpec(
                theta=replace(DEFAULT_PARAMETERS, max_vel_x=1.2, gdist_scale=1.4),
                itype=InterventionType.TYPE_B,
                region=(0.8, 1.0, 3.7, 3.5),
                max_steps=30,
            ),
            None,
            None,
        ),
        (
            corner,
            ExpertSpec(
                theta=replace(DEFAULT_PARAMETERS, max_vel_x=0.65, max_vel_theta=2.0),
                itype=InterventionType.TYPE_B,
                region=(0.3, 2.5, 2.0, 4.3),
                max_steps=30,
            ),
            corner_start,
            corner_goal,
        ),
        (
            demo1,
            ExpertSpec(
                theta=replace(DEFAULT_PARAMETERS, max_vel_x=0.45),
                itype=InterventionType.DEMO,
                region=(0.6, 0.6, 3.9, 3.9),
                max_steps=30,
            ),
            None,
            None,
        ),
        (
            demo2,
            ExpertSpec(
                theta=replace(DEFAULT_PARAMETERS, max_vel_x=0.40, inflation_radius=0.22),
                itype=InterventionType.DEMO,
                region=(0.6, 0.6, 3.9, 3.9),
                max_steps=30,
            ),
            None,
            None,
        ),
    ]
    records = []
    envs = []
    for i, (grid, spec, start, goal) in enumerate(specs, start=1):
        kwargs = {}
        if start is not None:
            kwargs["start"] = start
        if goal is not None:
            kwargs["goal"] = goal
        records.append(scripted_intervention(grid, spec, context_id=i, **kwargs))
        envs.append(grid)
    return TrainingData(records=records, envs=envs)


def train_variants(
    data: TrainingData,
    variants: tuple[VariantSpec, ...] = STANDARD_VARIANTS,
    *,
    seed: int = 0,
    cma_config: CmaConfig = FIT_CMA_DEFAULTS,
    clf_config: ClassifierConfig = ClassifierConfig(),
    fit_workers: int | None = None,
) -> dict[str, TrainedPolicy | None]:
    """One policy per intervention subset; confidence on/off variants share
    the trained artifacts and differ only in gating.

    The record list is ordered A, B, D, so every subset is a prefix; each
    record is fitted once and the fits are shared across subsets (the
    per-record fit seeds coincide with what a standalone fit would use).
    """
    from .pipeline import fit_records

    fit_workers = fit_workers if fit_workers is not None else min(os.cpu_count() or 1, 4)
    fitted_all, info_all = fit_records(
        data.records, data.envs, cma_config=cma_config, workers=fit_workers
    )

    policies_by_subset: dict[tuple[InterventionType, ...], TrainedPolicy] = {}
    out: dict[str, TrainedPolicy | None] = {}
    for variant in variants:
        if variant.subset is None:
            out[variant.name] = None
            continue
        if variant.subset not in policies_by_subset:
            records, envs = data.subset(variant.subset)
            n = len(records)
            if records != data.records[:n]:
                raise ValueError("intervention subsets must be prefixes of the record list")
            policies_by_subset[variant.subset] = train(
                records,
                envs,
                cma_config=cma_config,
                clf_config=clf_config,
                seed=seed,
                fitted=fitted_all[:n],
                fit_info=info_all[:n],
            )
        base = policies_by_subset[variant.subset]
        out[variant.name] = TrainedPolicy(
            pmap=base.pmap,
            net=base.net,
            predictor=replace(base.predictor, use_confidence=variant.use_confidence),
            feature_config=base.feature_config,
            provenance=base.provenance,
        )
    return out


# --------------------------------------------------------------------------
# Trial matrix
# --------------------------------------------------------------------------


@dataclass
class TrialTable:
    runs_per_cell: int
    timeout_s: float
    rows: dict[tuple[str, str], list[dict]] = field(default_factory=dict)

    @property
    def env_names(self) -> list[str]:
        return sorted({env for env, _ in self.rows})

    @property
    def variant_names(self) -> list[str]:
        return sorted({variant for _, variant in self.rows})

    def times(self, env: str, variant: str) -> list[float]:
        return [row["score"] for row in self.rows[(env, variant)]]

    def mean_time(self, variant: str) -> float:
        scores = [row["score"] for (e, v), rows in self.rows.items() if v == variant for row in rows]
        return sum(scores) / len(scores)


def run_seed(base_seed: int, env_name: str, variant_name: str, run: int) -> int:
    digest = hashlib.sha256(f"{base_seed}|{env_name}|{variant_name}|{run}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def jittered_start(grid: OccupancyGrid, seed: int) -> Pose2D:
    rng = np.random.Generator(np.random.PCG64(seed))
    base = default_start_pose(grid)
    return Pose2D(
        base.x + rng.uniform(-0.07, 0.07),
        base.y + rng.uniform(-0.07, 0.07),
        base.theta + rng.uniform(-0.15, 0.15),
    )


def run_single_trial(
    grid: OccupancyGrid,
    policy: TrainedPolicy | None,
    seed: int,
    timeout_s: float,
    ctx: NavContext | None = None,
) -> dict:
    start = jittered_start(grid, seed)
    runner = policy if policy is not None else DEFAULT_PARAMETERS
    result = run_episode(grid, runner, start=start, timeout_s=timeout_s, ctx=ctx)
    score = result.traversal_time_s if result.reached else timeout_s
    return {"outcome": result.outcome, "time": result.traversal_time_s, "score": score}


_WORKER_STATE: dict = {}


def _matrix_worker_init(env_texts: dict[str, str], policy_texts: dict[str, str | None]) -> None:
    _WORKER_STATE["envs"] = {name: load_grid(text) for name, text in env_texts.items()}
    _WORKER_STATE["ctxs"] = {name: NavContext(grid) for name, grid in _WORKER_STATE["envs"].items()}
    _WORKER_STATE["policies"] = {
        name: (load_policy(text) if text is not None else None)
        for name, text in policy_texts.items()
    }


def _matrix_worker_run(task: tuple[str, str, int, int, float]) -> dict:
    env_name, variant_name, run, seed, timeout_s = task
    grid = _WORKER_STATE["envs"][env_name]
    ctx = _WORKER_STATE["ctxs"][env_name]
    policy = _WORKER_STATE["policies"][variant_name]
    row = run_single_trial(grid, policy, seed, timeout_s, ctx=ctx)
    return {"env": env_name, "variant": variant_name, "run": run, "seed": seed, **row}


def matrix_config_hash(
    envs: list[SuiteEnv],
    policies: dict[str, TrainedPolicy | None],
    runs_per_cell: int,
    base_seed: int,
    timeout_s: float,
) -> str:
    payload = hashlib.sha256()
    for env in envs:
        payload.update(env.name.encode())
        payload.update(dump_grid(env.grid).encode())
    for name in sorted(policies):
        payload.update(name.encode())
        policy = policies[name]
        payload.update(b"-" if policy is None else dump_policy(policy).encode())
    payload.update(f"{runs_per_cell}|{base_seed}|{timeout_s}".encode())
    return payload.hexdigest()[:16]


def run_matrix(
    envs: list[SuiteEnv],
    policies: dict[str, TrainedPolicy | None],
    runs_per_cell: int,
    base_seed: int,
    *,
    timeout_s: float = DEFAULT_TIMEOUT,
    results_path: str | None = None,
    workers: int | None = None,
    progress=None,
) -> TrialTable:
    """Every (environment, variant, run) trial with per-run derived seeds.

    Results stream to ``results_path`` (line JSON) keyed by a configuration
    hash; re-running skips completed trials, and a finished matrix is
    idempotent."""
    config_hash = matrix_config_hash(envs, policies, runs_per_cell, base_seed, timeout_s)
    done: dict[tuple[str, str, int], dict] = {}
    if results_path and os.path.exists(results_path):
        with open(results_path, "r", encoding="ascii") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if lines:
            header = json.loads(lines[0])
            if header.get("config_hash") == config_hash:
                for line in lines[1:]:
                    row = json.loads(line)
                    done[(row["env"], row["variant"], row["run"])] = row

    tasks = []
    for env in envs:
        for variant_name in policies:
            for run in range(runs_per_cell):
                if (env.name, variant_name, run) in done:
                    continue
                seed = run_seed(base_seed, env.name, variant_name, run)
                tasks.append((env.name, variant_name, run, seed, timeout_s))

    results = dict(done)
    if tasks:
        env_texts = {env.name: dump_grid(env.grid) for env in envs}
        policy_texts = {
            name: (dump_policy(p) if p is not None else None) for name, p in policies.items()
        }
        workers = workers if workers is not None else min(os.cpu_count() or 1, 4)
        if workers > 1:
            with ProcessPoolExecutor(
                max_workers=workers,
                initializer=_matrix_worker_init,
                initargs=(env_texts, policy_texts),
            ) as pool:
                for row in pool.map(_matrix_worker_run, tasks, chunksize=4):
                    results[(row["env"], row["variant"], row["run"])] = row
                    if progress:
                        progress(len(results), len(tasks) + len(done))
        else:
            _matrix_worker_init(env_texts, policy_texts)
            for task in tasks:
                row = _matrix_worker_run(task)
                results[(row["env"], row["variant"], row["run"])] = row
                if progress:
                    progress(len(results), len(tasks) + len(done))

    if results_path:
        lines = [json.dumps({"config_hash": config_hash}, sort_keys=True, separators=(",", ":"))]
        for key in sorted(results):
            lines.append(json.dumps(results[key], sort_keys=True, separators=(",", ":")))
        text = "\n".join(lines) + "\n"
        existing = None
        if os.path.exists(results_path):
            with open(results_path, "r", encoding="ascii") as fh:
                existing = fh.read()
        if existing != text:
            with open(results_path, "w", encoding="ascii") as fh:
                fh.write(text)

    table = TrialTable(runs_per_cell=runs_per_cell, timeout_s=timeout_s)
    for (env_name, variant_name, run), row in sorted(results.items()):
        table.rows.setdefault((env_name, variant_name), []).append(row)
    return table


# --------------------------------------------------------------------------
# Significance
# --------------------------------------------------------------------------


def significance_matrix(
    table: TrialTable, alpha: float = 0.05
) -> tuple[list[str], np.ndarray, list[tuple[str, float]]]:
    """Percentage of environments where the row variant's mean time is
    higher than the column variant's with Welch p < alpha. Variants are
    ordered worst-to-best by overall mean time, and that ordering is also
    returned."""
    ordering = sorted(
        ((name, table.mean_time(name)) for name in table.variant_names),
        key=lambda kv: -kv[1],
    )
    names = [name for name, _ in ordering]
    n = len(names)
    envs = table.env_names
    matrix = np.zeros((n, n))
    for i, m1 in enumerate(names):
        for j, m2 in enumerate(names):
            if i == j:
                continue
            worse = 0
            for env in envs:
                a = table.times(env, m1)
                b = table.times(env, m2)
                mean_a = sum(a) / len(a)
                mean_b = sum(b) / len(b)
                if mean_a <= mean_b:
                    continue
                try:
                    result = welch_t(a, b)
                except DegenerateSamplesError:
                    continue
                if result.p < alpha:
                    worse += 1
            matrix[i, j] = 100.0 * worse / len(envs)
    return names, matrix, ordering


def significance_cell(table: TrialTable, m1: str, m2: str, alpha: float = 0.05) -> float:
    names, matrix, _ = significance_matrix(table, alpha)
    return float(matrix[names.index(m1), names.index(m2)])


def format_report(table: TrialTable, alpha: float = 0.05, fmt: str = "md") -> str:
    names, matrix, ordering = significance_matrix(table, alpha)
    if fmt == "csv":
        lines = ["variant,mean_time_s"]
        for name, mean in ordering:
            lines.append(f"{name},{mean:.3f}")
        lines.append("")
        lines.append("worse_vs," + ",".join(names))
        for i, name in enumerate(names):
            lines.append(name + "," + ",".join(f"{matrix[i, j]:.1f}" for j in range(len(names))))
        return "\n".join(lines) + "\n"
    if fmt != "md":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = ["# Benchmark report", "", "## Mean traversal time (worst to best)", ""]
    lines.append("| variant | mean time (s) |")
    lines.append("|---|---|")
    for name, mean in ordering:
        lines.append(f"| {name} | {mean:.3f} |")
    lines.append("")
    lines.append(f"## Share of environments significantly worse (p < {alpha})")
    lines.append("")
    lines.append("| worse \\ better | " + " | ".join(names) + " |")
    lines.append("|" + "---|" * (len(names) + 1))
    for i, name in enumerate(names):
        cells = " | ".join(f"{matrix[i, j]:.0f}%" for j in range(len(names)))
        lines.append(f"| {name} | {cells} |")
    return "\n".join(lines) + "\n"
