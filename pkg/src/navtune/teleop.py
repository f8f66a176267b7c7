"""Live-session core: a deterministic tick machine driving the simulator
under planner autopilot, accepting pause/rewind/drive/mark commands, and
capturing intervention records.

The machine is pure with respect to wall time: the server paces `step()`
calls, commands apply between ticks, and replaying a command log headlessly
reproduces the session bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .intervention import (
    RING_CAPACITY,
    InterventionRecord,
    InterventionType,
    InvalidSpanError,
    OutOfWindowError,
    SimSnapshot,
    SimTrace,
    record_to_log,
)
from .nav import (
    DEFAULT_PARAMETERS,
    ControllerState,
    NavContext,
    ParameterSet,
    PlannerInput,
    control_step,
    local_goal,
)
from .robot import CONTROL_EVERY, SIM_DT, Action, Pose2D, RobotState, clamp_action, step
from .world import (
    DEFAULT_SCAN,
    OccupancyGrid,
    ScanConfig,
    default_goal_xy,
    default_start_pose,
    is_collision,
    raycast,
)

PROTOCOL_VERSION = 1
DEFAULT_PORT = 7777


class ProtocolError(ValueError):
    def __init__(self, message: str, expected: str = ""):
        super().__init__(message)
        self.expected = expected


@dataclass
class SessionConfig:
    grid: OccupancyGrid
    seed: int = 0
    theta: ParameterSet = DEFAULT_PARAMETERS
    scan_config: ScanConfig = DEFAULT_SCAN
    ring_capacity: int = RING_CAPACITY
    start: Pose2D | None = None
    goal: tuple[float, float] | None = None
    env_name: str = ""


COMMAND_KINDS = (
    "load_env",
    "start",
    "pause",
    "rewind_to",
    "drive",
    "take_control",
    "release_control",
    "mark_begin",
    "mark_end",
    "save_record",
)


class TeleopSession:
    """Single teleoperation session over one environment."""

    def __init__(self, config: SessionConfig):
        self._seq = 0
        self.records: list[InterventionRecord] = []
        self.command_log: list[dict] = []
        self._load(config)

    # -- lifecycle ---------------------------------------------------------

    def _load(self, config: SessionConfig) -> None:
        self.config = config
        self.ctx = NavContext(config.grid)
        self.goal = config.goal if config.goal is not None else default_goal_xy(config.grid)
        start = config.start if config.start is not None else default_start_pose(config.grid)
        self.state = RobotState(start, Action(0.0, 0.0), 0.0)
        self.controller = ControllerState()
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.trace = SimTrace(config.ring_capacity)
        self.tick = 0
        self.running = False
        self.controlling = False
        self.human_action = Action(0.0, 0.0)
        self.held_action = Action(0.0, 0.0)
        self.mark_begin_tick: int | None = None
        self.mark_span: tuple[int, int, InterventionType] | None = None
        self.next_context_id = len(self.records) + 1
        self.last_feasible = True
        self._scan = None
        self._planner_input = None

    # -- messages ----------------------------------------------------------

    def _msg(self, kind: str, payload: dict) -> dict:
        self._seq += 1
        return {"kind": kind, "seq": self._seq, "payload": payload}

    def _error(self, message: str, expected: str = "") -> dict:
        return self._msg("error", {"message": message, "expected": expected})

    def hello(self) -> dict:
        from .world import dump_grid

        return self._msg(
            "status",
            {
                "protocol": PROTOCOL_VERSION,
                "env_name": self.config.env_name,
                "grid": dump_grid(self.config.grid),
                "goal": list(self.goal),
                "dt": SIM_DT,
                "control_every": CONTROL_EVERY,
                "max_range": self.config.scan_config.max_range,
            },
        )

    def state_frame(self) -> dict:
        try:
            window = self.trace.window
        except OutOfWindowError:
            window = (self.state.t, self.state.t)
        return self._msg(
            "state",
            {
                "t": self.state.t,
                "tick": self.tick,
                "pose": [self.state.pose.x, self.state.pose.y, self.state.pose.theta],
                "vel": [self.state.vel.v, self.state.vel.w],
                "action": [self.held_action.v, self.held_action.w],
                "running": self.running,
                "controlling": self.controlling,
                "feasible": self.last_feasible,
                "recovering": self.controller.recovering,
                "ring": [window[0], window[1]],
                "mark_open": self.mark_begin_tick is not None,
                "mark_closed": self.mark_span is not None,
                "records": len(self.records),
            },
        )

    def scan_frame(self) -> dict | None:
        if self._scan is None:
            return None
        return self._msg(
            "scan_frame",
            {
                "t": self.state.t,
                "pose": [self.state.pose.x, self.state.pose.y, self.state.pose.theta],
                "ranges": [round(float(r), 4) for r in self._scan.ranges],
                "angle_min": self._scan.angle_min,
                "angle_max": self._scan.angle_max,
                "max_range": self._scan.max_range,
            },
        )

    # -- commands ----------------------------------------------------------

    def handle(self, cmd: dict) -> list[dict]:
        """Apply one client command at the current tick boundary; returns the
        frames to send. Rejected commands produce an error frame and leave
        the session untouched."""
        kind = cmd.get("kind")
        try:
            if kind not in COMMAND_KINDS:
                raise ProtocolError(f"unknown command kind {kind!r}", expected="|".join(COMMAND_KINDS))
            out = getattr(self, f"_cmd_{kind}")(cmd)
            self.command_log.append({"tick": self.tick, "cmd": cmd})
            return out
        except ProtocolError as err:
            return [self._error(str(err), err.expected)]
        except (OutOfWindowError, InvalidSpanError) as err:
            return [self._error(str(err))]

    def _cmd_load_env(self, cmd: dict) -> list[dict]:
        from .world import load_grid

        grid_text = cmd.get("grid")
        if not grid_text:
            raise ProtocolError("load_env requires a grid payload")
        try:
            grid = load_grid(grid_text)
        except ValueError as err:
            raise ProtocolError(f"bad grid: {err}") from err
        self._load(replace(self.config, grid=grid, env_name=cmd.get("name", "uploaded")))
        return [self.hello(), self.state_frame()]

    def _cmd_start(self, cmd: dict) -> list[dict]:
        self.running = True
        return [self.state_frame()]

    def _cmd_pause(self, cmd: dict) -> list[dict]:
        self.running = False
        return [self.state_frame()]

    def _cmd_take_control(self, cmd: dict) -> list[dict]:
        self.controlling = True
        self.human_action = Action(0.0, 0.0)
        return [self.state_frame()]

    def _cmd_release_control(self, cmd: dict) -> list[dict]:
        self.controlling = False
        return [self.state_frame()]

    def _cmd_drive(self, cmd: dict) -> list[dict]:
        if not self.controlling:
            raise ProtocolError("drive requires control", expected="take_control first")
        try:
            v, w = float(cmd["v"]), float(cmd["w"])
        except (KeyError, TypeError, ValueError) as err:
            raise ProtocolError(f"drive needs numeric v and w: {err}") from err
        self.human_action = clamp_action(Action(v, w), self.ctx.limits)
        return []

    def _cmd_rewind_to(self, cmd: dict) -> list[dict]:
        if self.running:
            raise ProtocolError("rewind requires a paused session", expected="pause first")
        t_target = float(cmd.get("t", -1.0))
        if int(round(t_target / SIM_DT)) == self.tick:
            return [self.state_frame()]  # rewinding to now is the identity
        snap = self.trace.rewind(t_target)
        self._restore(snap)
        return [self.state_frame()]

    def _cmd_mark_begin(self, cmd: dict) -> list[dict]:
        self.mark_begin_tick = self.tick
        self.mark_span = None
        return [self.state_frame()]

    def _cmd_mark_end(self, cmd: dict) -> list[dict]:
        if self.mark_begin_tick is None:
            raise ProtocolError("mark_end without open mark_begin", expected="mark_begin")
        try:
            itype = InterventionType(cmd.get("itype", ""))
        except ValueError as err:
            raise ProtocolError(f"bad intervention type: {err}", expected="A|B|D") from err
        if self.tick <= self.mark_begin_tick:
            raise ProtocolError("mark span is empty")
        self.mark_span = (self.mark_begin_tick, self.tick, itype)
        self.mark_begin_tick = None
        return [self.state_frame()]

    def _cmd_save_record(self, cmd: dict) -> list[dict]:
        if self.mark_span is None:
            raise ProtocolError("save_record without a closed mark span", expected="mark_begin/mark_end")
        t0, t1, itype = self.mark_span
        record = self.trace.capture(
            t0 * SIM_DT,
            t1 * SIM_DT,
            itype,
            context_id=self.next_context_id,
            meta={"env_file": self.config.env_name, "seed": self.config.seed},
        )
        self.records.append(record)
        self.next_context_id += 1
        self.mark_span = None
        return [
            self._msg(
                "record_ack",
                {"context_id": record.context_id, "itype": itype.value, "steps": len(record.steps)},
            ),
            self.state_frame(),
        ]

    # -- simulation --------------------------------------------------------

    def _restore(self, snap: SimSnapshot) -> None:
        self.tick = snap.tick
        self.state = snap.state
        self.held_action = snap.held_action
        self.controller = snap.controller
        self.rng = np.random.Generator(np.random.PCG64())
        self.rng.bit_generator.state = snap.rng_state
        self._planner_input = snap.planner_input
        self._scan = snap.planner_input.scan if snap.planner_input is not None else None

    def _snapshot(self, planner_input, applied: Action | None) -> None:
        self.trace.append(
            SimSnapshot(
                tick=self.tick,
                state=self.state,
                held_action=self.held_action,
                controller=self.controller,
                rng_state=dict(self.rng.bit_generator.state),
                planner_input=planner_input,
                applied_action=applied,
            )
        )

    def step(self) -> list[dict]:
        """Advance one sim tick; emits frames on control ticks."""
        if not self.running:
            return []
        frames: list[dict] = []
        planner_input = None
        applied = None
        if self.tick % CONTROL_EVERY == 0:
            scan = raycast(self.config.grid, self.state.pose, self.config.scan_config, self.rng)
            self._scan = scan
            theta = self.config.theta
            field_ = self.ctx.goal_field(theta.inflation_radius, self.goal)
            path = field_.path_from(self.state.pose.x, self.state.pose.y)
            if path is None:
                planner_input = PlannerInput(self.state, scan, np.zeros((0, 2)), self.goal, self.goal)
            else:
                lg = local_goal(path, self.state.pose)
                planner_input = PlannerInput(self.state, scan, path.waypoints, lg, self.goal)
            if self.controlling:
                self.held_action = self.human_action
                self.last_feasible = True
            else:
                action, self.controller, feasible = control_step(
                    planner_input,
                    theta,
                    self.ctx.cost_grid(theta.inflation_radius),
                    self.ctx.limits,
                    self.controller,
                    footprint_radius=self.ctx.planning_footprint,
                )
                self.held_action = action
                self.last_feasible = feasible
            applied = self.held_action
            self._planner_input = planner_input

        self._snapshot(planner_input, applied)
        self.state = step(self.state, self.held_action, self.ctx.limits, SIM_DT)
        self.tick += 1
        if self.tick % CONTROL_EVERY == 0:
            frames.append(self.state_frame())
            scan_msg = self.scan_frame()
            if scan_msg is not None:
                frames.append(scan_msg)
        return frames


def replay_command_log(config: SessionConfig, command_log: list[dict]) -> TeleopSession:
    """Headless re-run: step to each logged command's tick and apply it.
    Ticks only advance while running, exactly as in the live session."""
    session = TeleopSession(config)
    for row in command_log:
        target = int(row["tick"])
        while session.tick < target:
            if not session.running:
                raise ValueError("invalid command log: tick advances while paused")
            session.step()
        session.handle(row["cmd"])
    return session


def records_to_bytes(records: list[InterventionRecord]) -> bytes:
    return "".join(record_to_log(r) for r in records).encode("ascii")
