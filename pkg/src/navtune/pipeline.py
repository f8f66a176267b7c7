"""End-to-end orchestration: fit one parameter set per correction, train
the context classifier, and deploy the switching planner in closed loop.

Deployment switches parameter sets at the next planner tick with no
blending; the mode filter is the only smoothing. Cost grids and goal
fields are cached per inflation radius (the map holds N+1 of them).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .context import (
    DEFAULT_EPSILON_U,
    DEFAULT_FEATURES,
    DEFAULT_WINDOW,
    ClassifierConfig,
    EvidentialNet,
    FeatureConfig,
    confidence_gate,
    edl_predict,
    feature_domain_box,
    featurize,
    mode_filter,
    net_from_dict,
    net_to_dict,
    train_evidential_net,
)
from .intervention import InterventionRecord, build_dataset
from .learn import FIT_CMA_DEFAULTS, BCWeights, CmaConfig, CmaResult, bc_loss, fit_parameters, fit_target
from .nav import (
    DEFAULT_PARAMETERS,
    DEFAULT_SPACE,
    ControllerState,
    NavContext,
    ParameterSet,
    ParameterSpace,
    PlannerInput,
    control_step,
    local_goal,
)
from .robot import CONTROL_EVERY, SIM_DT, Action, Pose2D, RobotState, step
from .world import (
    DEFAULT_SCAN,
    OccupancyGrid,
    ScanConfig,
    default_goal_xy,
    default_start_pose,
    is_collision,
    raycast,
)

GOAL_TOLERANCE = 0.3
DEFAULT_TIMEOUT = 50.0


@dataclass(frozen=True)
class PredictorConfig:
    epsilon_u: float = DEFAULT_EPSILON_U
    window: int = DEFAULT_WINDOW
    use_confidence: bool = True  # ablation hook: raw argmax when off

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon_u < 1.0:
            raise ValueError("epsilon_u must be in (0, 1)")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd length")


class ParameterMap:
    """Total mapping from context ids 0..N to parameter sets; entry 0 is
    pinned to the default."""

    def __init__(self, learned: dict[int, ParameterSet], default: ParameterSet = DEFAULT_PARAMETERS):
        entries = {0: default}
        for cid, params in learned.items():
            if cid == 0:
                if params != default:
                    raise ValueError("context 0 is reserved for the default parameters")
                continue
            entries[int(cid)] = params
        expected = set(range(len(entries)))
        if set(entries) != expected:
            raise ValueError(f"context ids must be 0..N, got {sorted(entries)}")
        self._entries = entries

    @property
    def n_contexts(self) -> int:
        return len(self._entries) - 1

    def __getitem__(self, context: int) -> ParameterSet:
        return self._entries[context]

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterMap) and self._entries == other._entries

    def items(self):
        return sorted(self._entries.items())


@dataclass
class TrainedPolicy:
    pmap: ParameterMap
    net: EvidentialNet
    predictor: PredictorConfig
    feature_config: FeatureConfig = DEFAULT_FEATURES
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.net.n_contexts != self.pmap.n_contexts:
            raise ValueError(
                f"classifier width {self.net.n_contexts} != map contexts {self.pmap.n_contexts}"
            )


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _fit_one(args):
    record, env, space, weights, cfg, default, index = args
    ctx = NavContext(env)
    theta_i, result = fit_parameters(record, space, weights, cfg, ctx, default=default)
    info = {
        "context": index,
        "itype": record.itype.value,
        "steps": len(record.steps),
        "loss": result.f,
        "evaluations": result.evaluations,
    }
    return index, theta_i, info


def fit_records(
    records: list[InterventionRecord],
    envs: list[OccupancyGrid],
    *,
    space: ParameterSpace = DEFAULT_SPACE,
    weights: BCWeights = BCWeights(),
    cma_config: CmaConfig = FIT_CMA_DEFAULTS,
    default: ParameterSet = DEFAULT_PARAMETERS,
    workers: int = 1,
) -> tuple[list[ParameterSet], list[dict]]:
    """Fit a parameter set to each record. The i-th fit derives its seed
    from the base seed and i, so parallel and serial execution agree."""
    tasks = []
    for i, (record, env) in enumerate(zip(records, envs), start=1):
        cfg = replace(cma_config, seed=cma_config.seed + 1000 * i)
        if cfg.f_target is None:
            cfg = replace(cfg, f_target=fit_target(len(record.steps)))
        tasks.append((record, env, space, weights, cfg, default, i))

    results: dict[int, tuple[ParameterSet, dict]] = {}
    try:
        if workers > 1 and len(tasks) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                for index, theta_i, info in pool.map(_fit_one, tasks):
                    results[index] = (theta_i, info)
        else:
            for task in tasks:
                index, theta_i, info = _fit_one(task)
                results[index] = (theta_i, info)
    except Exception as err:
        raise RuntimeError(f"parameter fit failed: {err}") from err
    thetas = [results[i][0] for i in range(1, len(tasks) + 1)]
    infos = [results[i][1] for i in range(1, len(tasks) + 1)]
    return thetas, infos


def train(
    records: list[InterventionRecord],
    envs: OccupancyGrid | list[OccupancyGrid],
    *,
    space: ParameterSpace = DEFAULT_SPACE,
    weights: BCWeights = BCWeights(),
    cma_config: CmaConfig = FIT_CMA_DEFAULTS,
    clf_config: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
    default: ParameterSet = DEFAULT_PARAMETERS,
    feature_config: FeatureConfig = DEFAULT_FEATURES,
    fitted: list[ParameterSet] | None = None,
    fit_info: list[dict] | None = None,
    fit_workers: int = 1,
) -> TrainedPolicy:
    """Fit a parameter set per record, then the context classifier, and
    assemble the switching policy. Deterministic given the seeds.

    Pre-fitted parameter sets may be passed to reuse fits across variant
    subsets."""
    if not records:
        raise ValueError("training requires at least one intervention")
    if isinstance(envs, OccupancyGrid):
        envs = [envs] * len(records)
    if len(envs) != len(records):
        raise ValueError("one environment per record required")

    if fitted is None:
        fitted, fit_info = fit_records(
            records,
            envs,
            space=space,
            weights=weights,
            cma_config=cma_config,
            default=default,
            workers=fit_workers,
        )
    if len(fitted) != len(records):
        raise ValueError("one fitted parameter set per record required")
    learned = {i: theta for i, theta in enumerate(fitted, start=1)}

    dataset = build_dataset(records)
    X = np.array([featurize(x, feature_config) for x, _ in dataset.items])
    labels = np.array([label - 1 for _, label in dataset.items])
    try:
        net, accuracy = train_evidential_net(
            X,
            labels,
            dataset.context_count,
            clf_config,
            seed=seed,
            feature_hash=feature_config.hash(),
            feature_box=feature_domain_box(feature_config),
        )
    except Exception as err:
        raise RuntimeError(f"classifier training failed: {err}") from err

    provenance = {
        "version": __version__,
        "seed": seed,
        "cma_seed": cma_config.seed,
        "records": [
            {"context_id": r.context_id, "itype": r.itype.value, "steps": len(r.steps)}
            for r in records
        ],
        "fits": fit_info or [],
        "classifier_accuracy": accuracy,
    }
    return TrainedPolicy(
        pmap=ParameterMap(learned, default=default),
        net=net,
        predictor=PredictorConfig(),
        feature_config=feature_config,
        provenance=provenance,
    )


# --------------------------------------------------------------------------
# Deployment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeployStep:
    action: Action | None
    context: int
    confidence: float
    history: tuple[int, ...]
    controller: ControllerState
    params: ParameterSet


def initial_history(predictor: PredictorConfig) -> tuple[int, ...]:
    """Deployment starts under default parameters: the window is seeded
    with zeros."""
    return (0,) * predictor.window


def deploy_step(
    policy: TrainedPolicy,
    x: PlannerInput,
    history: tuple[int, ...],
    ctx: NavContext,
    controller: ControllerState = ControllerState(),
) -> DeployStep:
    """One planner tick: classify, gate, mode-filter, then plan with the
    selected parameter set (recovery fallback included)."""
    pred = edl_predict(policy.net, featurize(x, policy.feature_config))
    if policy.predictor.use_confidence:
        gated = confidence_gate(pred, policy.predictor.epsilon_u)
    else:
        gated = pred.context
    new_history = (*history, gated)[-policy.predictor.window :]
    context = mode_filter(new_history)
    params = policy.pmap[context]

    # The chosen parameters own the cost grid and global path for this tick.
    field_ = ctx.goal_field(params.inflation_radius, x.goal)
    path = field_.path_from(x.state.pose.x, x.state.pose.y)
    if path is None:
        x_final = replace(x, global_path=np.zeros((0, 2)))
    else:
        lg = local_goal(path, x.state.pose)
        x_final = replace(x, global_path=path.waypoints, local_goal=lg)
    action, new_controller, _ = control_step(
        x_final,
        params,
        ctx.cost_grid(params.inflation_radius),
        ctx.limits,
        controller,
        footprint_radius=ctx.planning_footprint,
    )
    return DeployStep(
        action=action,
        context=context,
        confidence=pred.confidence,
        history=new_history,
        controller=new_controller,
        params=params,
    )


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    outcome: str  # reached | collision | stuck | timeout
    traversal_time_s: float
    poses: np.ndarray  # (ticks, 3)
    contexts: list[int]
    confidences: list[float]
    log_lines: list[str]

    @property
    def reached(self) -> bool:
        return self.outcome == "reached"


def _log_line(t: float, pose: Pose2D, action: Action, context: int, confidence: float) -> str:
    return json.dumps(
        {
            "t": t,
            "pose": [pose.x, pose.y, pose.theta],
            "action": [action.v, action.w],
            "context": context,
            "confidence": confidence,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def run_episode(
    grid: OccupancyGrid,
    policy: TrainedPolicy | ParameterSet,
    *,
    start: Pose2D | None = None,
    goal: tuple[float, float] | None = None,
    timeout_s: float = DEFAULT_TIMEOUT,
    scan_config: ScanConfig = DEFAULT_SCAN,
    ctx: NavContext | None = None,
    collect_log: bool = False,
    force_scan: bool = False,
    tick_hook=None,
) -> EpisodeResult:
    """Closed-loop run until the goal is within tolerance, a collision
    occurs, or the timeout expires. Deterministic: episodes carry no
    randomness of their own. ``tick_hook(tick, x, action, info)`` fires
    after every control decision with feasibility and context info."""
    start = start if start is not None else default_start_pose(grid)
    goal = goal if goal is not None else default_goal_xy(grid)
    ctx = ctx if ctx is not None else NavContext(grid)
    fixed_theta = policy if isinstance(policy, ParameterSet) else None
    needs_scan = fixed_theta is None or force_scan

    state = RobotState(start, Action(0.0, 0.0), 0.0)
    controller = ControllerState()
    history = initial_history(policy.predictor) if fixed_theta is None else ()
    action = Action(0.0, 0.0)
    poses = [(start.x, start.y, start.theta)]
    contexts: list[int] = []
    confidences: list[float] = []
    log_lines: list[str] = []
    outcome = "timeout"
    last_feasible = True

    if math.hypot(start.x - goal[0], start.y - goal[1]) <= GOAL_TOLERANCE:
        return EpisodeResult("reached", 0.0, np.array(poses), [], [], [])

    n_steps = int(round(timeout_s / SIM_DT))
    for k in range(n_steps):
        if k % CONTROL_EVERY == 0:
            scan = raycast(grid, state.pose, scan_config) if needs_scan else None
            if fixed_theta is not None:
                field_ = ctx.goal_field(fixed_theta.inflation_radius, goal)
                path = field_.path_from(state.pose.x, state.pose.y)
                if path is None:
                    x = PlannerInput(state, scan, np.zeros((0, 2)), goal, goal)
                else:
                    lg = local_goal(path, state.pose)
                    x = PlannerInput(state, scan, path.waypoints, lg, goal)
                action, controller, feasible = control_step(
                    x,
                    fixed_theta,
                    ctx.cost_grid(fixed_theta.inflation_radius),
                    ctx.limits,
                    controller,
                    footprint_radius=ctx.planning_footprint,
                )
                context, confidence = 0, 0.0
            else:
                x = PlannerInput(state, scan, np.zeros((1, 2)), goal, goal)
                result = deploy_step(policy, x, history, ctx, controller)
                history = result.history
                controller = result.controller
                context, confidence = result.context, result.confidence
                feasible = result.action is not None
                action = result.action if result.action is not None else action
                if result.action is None and not controller.recovering:
                    action = Action(0.0, 0.0)
            last_feasible = feasible
            contexts.append(context)
            confidences.append(confidence)
            if tick_hook is not None:
                tick_hook(k, x, action, {"context": context, "feasible": feasible, "confidence": confidence})
            if collect_log:
                log_lines.append(_log_line(state.t, state.pose, action, context, confidence))
        state = step(state, action, ctx.limits, SIM_DT)
        poses.append((state.pose.x, state.pose.y, state.pose.theta))
        if is_collision(grid, state.pose, ctx.footprint_radius):
            outcome = "collision"
            break
        if math.hypot(state.pose.x - goal[0], state.pose.y - goal[1]) <= GOAL_TOLERANCE:
            outcome = "reached"
            break
    if outcome == "timeout" and (controller.recovering or not last_feasible):
        outcome = "stuck"
    return EpisodeResult(
        outcome=outcome,
        traversal_time_s=state.t,
        poses=np.array(poses),
        contexts=contexts,
        confidences=confidences,
        log_lines=log_lines,
    )


# --------------------------------------------------------------------------
# Policy serialization
# --------------------------------------------------------------------------

POLICY_FORMAT_VERSION = 1


def policy_to_dict(policy: TrainedPolicy) -> dict:
    return {
        "format": "navtune-policy",
        "version": POLICY_FORMAT_VERSION,
        "parameter_map": {
            str(cid): {name: getattr(params, name) for name in params.__dataclass_fields__}
            for cid, params in policy.pmap.items()
        },
        "classifier": net_to_dict(policy.net),
        "predictor": {
            "epsilon_u": policy.predictor.epsilon_u,
            "window": policy.predictor.window,
            "use_confidence": policy.predictor.use_confidence,
        },
        "feature_config": {
            "bins": policy.feature_config.bins,
            "goal_cap": policy.feature_config.goal_cap,
            "max_speed": policy.feature_config.max_speed,
        },
        "provenance": policy.provenance,
    }


def policy_from_dict(data: dict) -> TrainedPolicy:
    if data.get("format") != "navtune-policy" or data.get("version") != POLICY_FORMAT_VERSION:
        raise ValueError("not a recognized policy file")
    fc = FeatureConfig(**data["feature_config"])
    net = net_from_dict(data["classifier"], expected_feature_hash=fc.hash())
    learned = {}
    default = None
    for cid_str, knobs in data["parameter_map"].items():
        params = ParameterSet(**knobs)
        if int(cid_str) == 0:
            default = params
        else:
            learned[int(cid_str)] = params
    if default is None:
        raise ValueError("policy file lacks the default (context 0) entry")
    pred = PredictorConfig(**data["predictor"])
    return TrainedPolicy(
        pmap=ParameterMap(learned, default=default),
        net=net,
        predictor=pred,
        feature_config=fc,
        provenance=data.get("provenance", {}),
    )


def dump_policy(policy: TrainedPolicy) -> str:
    return json.dumps(policy_to_dict(policy), sort_keys=True, separators=(",", ":")) + "\n"


def load_policy(text: str) -> TrainedPolicy:
    return policy_from_dict(json.loads(text))


def save_policy(policy: TrainedPolicy, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dump_policy(policy))


def read_policy(path: str) -> TrainedPolicy:
    with open(path, "r", encoding="ascii") as fh:
        return load_policy(fh.read())
