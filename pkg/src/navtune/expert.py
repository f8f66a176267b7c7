"""Scripted intervener: a planner running hidden known-good parameters
stands in for the human, so correction records can be produced headlessly
for tests and benchmarks.

The capture region plays the role of the human's judgment about where the
troublesome segment begins and ends; for outright failures the onset can
also be detected as the default planner's first infeasible tick.
"""

from __future__ import annotations

from dataclasses import dataclass

from .intervention import InterventionRecord, InterventionType
from .nav import DEFAULT_PARAMETERS, NavContext, ParameterSet, PlannerInput
from .pipeline import run_episode
from .robot import Action, Pose2D
from .world import DEFAULT_SCAN, OccupancyGrid, ScanConfig


@dataclass(frozen=True)
class ExpertSpec:
    theta: ParameterSet  # the hidden parameter set that handles the context well
    itype: InterventionType
    region: tuple[float, float, float, float]  # x0, y0, x1, y1 capture window
    max_steps: int = 80  # cap on captured control ticks


def _in_region(pose: Pose2D, region: tuple[float, float, float, float]) -> bool:
    x0, y0, x1, y1 = region
    return x0 <= pose.x <= x1 and y0 <= pose.y <= y1


def scripted_intervention(
    grid: OccupancyGrid,
    spec: ExpertSpec,
    context_id: int,
    *,
    start: Pose2D | None = None,
    goal: tuple[float, float] | None = None,
    scan_config: ScanConfig = DEFAULT_SCAN,
    ctx: NavContext | None = None,
    timeout_s: float = 50.0,
    meta: dict | None = None,
) -> InterventionRecord:
    """Drive the expert planner through the environment and record the
    contiguous control-tick segment inside the capture region."""
    captured: list[tuple[PlannerInput, Action]] = []
    done = False

    def hook(tick: int, x: PlannerInput, action: Action, info: dict) -> None:
        nonlocal done
        if done or not info["feasible"]:
            return
        if _in_region(x.state.pose, spec.region):
            captured.append((x, action))
            if len(captured) >= spec.max_steps:
                done = True
        elif captured:
            done = True  # left the region: the segment is over

    result = run_episode(
        grid,
        spec.theta,
        start=start,
        goal=goal,
        timeout_s=timeout_s,
        scan_config=scan_config,
        ctx=ctx,
        force_scan=True,
        tick_hook=hook,
    )
    if not captured:
        raise RuntimeError(
            f"expert never entered the capture region {spec.region} (outcome {result.outcome})"
        )
    record_meta = {"expert_outcome": result.outcome, **(meta or {})}
    return InterventionRecord(
        context_id=context_id,
        itype=spec.itype,
        steps=tuple(captured),
        meta=record_meta,
    )


def default_failure_onset(
    grid: OccupancyGrid,
    *,
    theta: ParameterSet = DEFAULT_PARAMETERS,
    start: Pose2D | None = None,
    goal: tuple[float, float] | None = None,
    timeout_s: float = 50.0,
) -> float | None:
    """Time of the default planner's first infeasible control tick, the
    scripted stand-in for where a human would say the failure began.
    None when the default run never fails."""
    onset: list[float] = []

    def hook(tick: int, x: PlannerInput, action: Action, info: dict) -> None:
        if not onset and not info["feasible"]:
            onset.append(x.state.t)

    run_episode(grid, theta, start=start, goal=goal, timeout_s=timeout_s, tick_hook=hook)
    return onset[0] if onset else None
