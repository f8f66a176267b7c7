"""Intervention capture: the rewindable trace ring, typed correction
records, labeled dataset assembly, and the line-JSON log format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nav import ControllerState, PlannerInput
from .robot import SIM_DT, Action, Pose2D, RobotState

RING_CAPACITY = 1200  # steps; 60 s at the fixed timestep


class InterventionType(enum.Enum):
    TYPE_A = "A"  # the system failed outright; the human had to step in
    TYPE_B = "B"  # suboptimal behavior worth correcting
    DEMO = "D"  # extra demonstration where the system already did fine


class OutOfWindowError(ValueError):
    """Rewind target is outside the retained trace window."""


class InvalidSpanError(ValueError):
    """Capture span is empty, reversed, or crosses a rewind boundary."""


@dataclass(frozen=True)
class SimSnapshot:
    """Everything needed to resume the simulation bit-identically."""

    tick: int
    state: RobotState
    held_action: Action
    controller: ControllerState
    rng_state: dict
    planner_input: PlannerInput | None = None  # populated on control ticks
    applied_action: Action | None = None

    @property
    def t(self) -> float:
        return self.state.t


@dataclass(frozen=True)
class InterventionRecord:
    context_id: int
    itype: InterventionType
    steps: tuple[tuple[PlannerInput, Action], ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("intervention record must contain at least one step")
        if self.context_id < 1:
            raise ValueError("context ids start at 1")
        times = [x.state.t for x, _ in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("step timestamps must strictly increase")


class SimTrace:
    """Ring of per-step snapshots supporting rewind and span capture."""

    def __init__(self, capacity: int = RING_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._snaps: list[SimSnapshot] = []

    def append(self, snap: SimSnapshot) -> None:
        if self._snaps and snap.tick <= self._snaps[-1].tick:
            raise ValueError("snapshots must advance in tick order")
        self._snaps.append(snap)
        if len(self._snaps) > self.capacity:
            self._snaps = self._snaps[-self.capacity :]

    def __len__(self) -> int:
        return len(self._snaps)

    @property
    def ticks(self) -> tuple[int, int]:
        if not self._snaps:
            raise OutOfWindowError("trace is empty")
        return self._snaps[0].tick, self._snaps[-1].tick

    @property
    def window(self) -> tuple[float, float]:
        lo, hi = self.ticks
        return lo * SIM_DT, hi * SIM_DT

    def snapshot_at(self, tick: int) -> SimSnapshot:
        if not self._snaps:
            raise OutOfWindowError("trace is empty")
        lo, hi = self.ticks
        if not lo <= tick <= hi:
            raise OutOfWindowError(f"tick {tick} outside ring [{lo}, {hi}]")
        snap = self._snaps[tick - self._snaps[0].tick]
        assert snap.tick == tick
        return snap

    def rewind(self, t_target: float) -> SimSnapshot:
        """Snapshot at the given time; drops it and any later history so
        the timeline stays linear (resuming re-appends the same tick)."""
        tick = int(round(t_target / SIM_DT))
        snap = self.snapshot_at(tick)
        self._snaps = self._snaps[: tick - self._snaps[0].tick]
        return snap

    def capture(
        self, start_t: float, end_t: float, itype: InterventionType, context_id: int, meta: dict | None = None
    ) -> InterventionRecord:
        """Record of the (input, applied action) pairs at control-rate ticks
        in the half-open span [start_t, end_t): a 3 s capture at 10 Hz
        control yields exactly 30 steps."""
        if end_t <= start_t:
            raise InvalidSpanError(f"span [{start_t}, {end_t}] is empty")
        t0 = int(round(start_t / SIM_DT))
        t1 = int(round(end_t / SIM_DT))
        try:
            lo, hi = self.ticks
        except OutOfWindowError as err:
            raise InvalidSpanError(str(err)) from err
        if t0 < lo or t1 - 1 > hi:
            raise InvalidSpanError(
                f"span ticks [{t0}, {t1}) not fully inside ring [{lo}, {hi}]"
            )
        steps = []
        for tick in range(t0, t1):
            snap = self.snapshot_at(tick)
            if snap.planner_input is not None and snap.applied_action is not None:
                steps.append((snap.planner_input, snap.applied_action))
        if not steps:
            raise InvalidSpanError("span contains no control ticks")
        return InterventionRecord(
            context_id=context_id, itype=itype, steps=tuple(steps), meta=dict(meta or {})
        )


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[tuple[PlannerInput, int], ...]
    context_count: int

    def __post_init__(self) -> None:
        labels = {label for _, label in self.items}
        if labels and (min(labels) < 1 or max(labels) > self.context_count):
            raise ValueError("labels must lie in [1, context_count]")
        if len(labels) != self.context_count:
            raise ValueError("every context must contribute at least one item")


def build_dataset(records: Sequence[InterventionRecord]) -> LabeledDataset:
    """Concatenate record steps; the i-th record (1-based) provides label i.

    Demonstration records are treated exactly like corrections. Labels come
    from record position so that training on a subset renumbers cleanly;
    for a full session capture, position and context_id coincide.
    """
    if not records:
        raise ValueError("no intervention records")
    items: list[tuple[PlannerInput, int]] = []
    for i, record in enumerate(records, start=1):
        for x, _ in record.steps:
            items.append((x, i))
    return LabeledDataset(items=tuple(items), context_count=len(records))


# --------------------------------------------------------------------------
# Log format: one JSON header line, then one JSON line per step
# --------------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def record_to_log(record: InterventionRecord) -> str:
    header = {
        "context_id": record.context_id,
        "itype": record.itype.value,
        "env_file": record.meta.get("env_file", ""),
        "seed": record.meta.get("seed", 0),
    }
    lines = [_canonical(header)]
    for x, a in record.steps:
        scan = x.scan.ranges.tolist() if x.scan is not None else []
        lines.append(
            _canonical(
                {
                    "t": x.state.t,
                    "pose": [x.state.pose.x, x.state.pose.y, x.state.pose.theta],
                    "vel": [x.state.vel.v, x.state.vel.w],
                    "scan": scan,
                    "local_goal": [x.local_goal[0], x.local_goal[1]],
                    "action": [a.v, a.w],
                }
            )
        )
    return "\n".join(lines) + "\n"


def record_from_log(text: str, path_provider=None, goal=None, scan_meta=None) -> InterventionRecord:
    """Parse a log back into a record.

    The log stores no global path; ``path_provider(pose) -> (N,2) array``
    rebuilds it (normally the default-parameter goal field of the logged
    environment). Without one, the path degenerates to the local goal.
    """
    from .world import DEFAULT_SCAN, LaserScan

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty intervention log")
    header = json.loads(lines[0])
    steps = []
    meta = {"env_file": header.get("env_file", ""), "seed": header.get("seed", 0)}
    sm = scan_meta or {
        "angle_min": DEFAULT_SCAN.angle_min,
        "angle_max": DEFAULT_SCAN.angle_max,
        "max_range": DEFAULT_SCAN.max_range,
    }
    for line in lines[1:]:
        row = json.loads(line)
        pose = Pose2D(*row["pose"])
        state = RobotState(pose, Action(*row["vel"]), row["t"])
        scan = None
        if row["scan"]:
            scan = LaserScan(
                ranges=np.array(row["scan"]),
                angle_min=sm["angle_min"],
                angle_max=sm["angle_max"],
                max_range=sm["max_range"],
            )
        local_goal = (row["local_goal"][0], row["local_goal"][1])
        if path_provider is not None:
            path = path_provider(pose)
        else:
            path = np.array([[pose.x, pose.y], list(local_goal)])
        episode_goal = goal if goal is not None else local_goal
        x = PlannerInput(state, scan, path, local_goal, episode_goal)
        steps.append((x, Action(*row["action"])))
    return InterventionRecord(
        context_id=int(header["context_id"]),
        itype=InterventionType(header["itype"]),
        steps=tuple(steps),
        meta=meta,
    )


def write_record_logs(records: Iterable[InterventionRecord], directory: str) -> list[str]:
    import os

    paths = []
    for record in records:
        name = f"intervention_{record.context_id:03d}_{record.itype.value}.jsonl"
        path = os.path.join(directory, name)
        with open(path, "w", encoding="ascii") as fh:
            fh.write(record_to_log(record))
        paths.append(path)
    return paths
