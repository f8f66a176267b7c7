"""Differential-drive kinematics and deterministic fixed-timestep stepping."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

SIM_DT = 0.05
"""Fixed simulation timestep in seconds."""

CONTROL_EVERY = 2
"""Planner runs every this many sim steps (10 Hz control at SIM_DT=0.05)."""

CONTROL_PERIOD = SIM_DT * CONTROL_EVERY

_STRAIGHT_W = 1e-6


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", normalize_angle(self.theta))


@dataclass(frozen=True)
class Action:
    v: float
    w: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.v) and math.isfinite(self.w)):
            raise ValueError(f"non-finite action ({self.v}, {self.w})")


STOP = Action(0.0, 0.0)


@dataclass(frozen=True)
class RobotState:
    pose: Pose2D
    vel: Action
    t: float = 0.0


@dataclass(frozen=True)
class KinematicLimits:
    max_v: float = 2.0
    max_w: float = 3.2
    max_acc_v: float = 2.0
    max_acc_w: float = 4.0
    # Reverse is normally restricted to a slow backing crawl used by the
    # recovery behavior; set full_reverse to lift that restriction.
    full_reverse: bool = False
    reverse_fraction: float = 0.1

    def __post_init__(self) -> None:
        if min(self.max_v, self.max_w, self.max_acc_v, self.max_acc_w) <= 0:
            raise ValueError("kinematic limits must be positive")

    @property
    def min_v(self) -> float:
        return -self.max_v if self.full_reverse else -self.reverse_fraction * self.max_v


DEFAULT_LIMITS = KinematicLimits()


def clamp_action(cmd: Action, limits: KinematicLimits) -> Action:
    v = min(max(cmd.v, limits.min_v), limits.max_v)
    w = min(max(cmd.w, -limits.max_w), limits.max_w)
    return Action(v, w)


def _clip(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def step(state: RobotState, cmd: Action, limits: KinematicLimits, dt: float) -> RobotState:
    """Advance one timestep: ramp velocity toward ``cmd`` under acceleration
    limits, then integrate the pose along the exact circular arc."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    target = clamp_action(cmd, limits)
    v = state.vel.v + _clip(target.v - state.vel.v, -limits.max_acc_v * dt, limits.max_acc_v * dt)
    w = state.vel.w + _clip(target.w - state.vel.w, -limits.max_acc_w * dt, limits.max_acc_w * dt)
    pose = integrate_arc(state.pose, v, w, dt)
    return RobotState(pose=pose, vel=Action(v, w), t=state.t + dt)


def integrate_arc(pose: Pose2D, v: float, w: float, dt: float) -> Pose2D:
    """Constant-velocity unicycle update; analytic arc except for |w| ~ 0."""
    if abs(w) < _STRAIGHT_W:
        return Pose2D(
            x=pose.x + v * math.cos(pose.theta) * dt,
            y=pose.y + v * math.sin(pose.theta) * dt,
            theta=pose.theta + w * dt,
        )
    radius = v / w
    theta1 = pose.theta + w * dt
    return Pose2D(
        x=pose.x + radius * (math.sin(theta1) - math.sin(pose.theta)),
        y=pose.y - radius * (math.cos(theta1) - math.cos(pose.theta)),
        theta=theta1,
    )


def with_pose(state: RobotState, pose: Pose2D) -> RobotState:
    return replace(state, pose=pose)
