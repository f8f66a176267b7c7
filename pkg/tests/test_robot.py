import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navtune import robot
from navtune.robot import Action, KinematicLimits, Pose2D, RobotState


NO_ACCEL = KinematicLimits(max_v=5.0, max_w=5.0, max_acc_v=1e9, max_acc_w=1e9, full_reverse=True)


def fine_euler(pose, v, w, duration, substeps=100_000):
    x, y, th = pose.x, pose.y, pose.theta
    h = duration / substeps
    for _ in range(substeps):
        x += v * math.cos(th) * h
        y += v * math.sin(th) * h
        th += w * h
    return x, y, th


def test_zero_command_from_rest():
    s = RobotState(Pose2D(1.0, 2.0, 0.5), Action(0, 0), 3.0)
    s2 = robot.step(s, Action(0, 0), robot.DEFAULT_LIMITS, 0.05)
    assert s2.pose == s.pose
    assert s2.t == pytest.approx(3.05)


def test_straight_line_advance():
    s = RobotState(Pose2D(0, 0, 0.7), Action(1.0, 0.0), 0.0)
    s2 = robot.step(s, Action(1.0, 0.0), NO_ACCEL, 1.0)
    assert s2.pose.x == pytest.approx(math.cos(0.7))
    assert s2.pose.y == pytest.approx(math.sin(0.7))
    assert s2.pose.theta == pytest.approx(0.7)


def test_half_circle_matches_fine_euler():
    # v = w = 1 for pi seconds traverses half of a unit circle.
    s = RobotState(Pose2D(0, 0, 0), Action(0, 0), 0.0)
    s2 = robot.step(s, Action(1.0, 1.0), NO_ACCEL, math.pi)
    assert s2.pose.x == pytest.approx(0.0, abs=1e-9)
    assert s2.pose.y == pytest.approx(2.0, abs=1e-9)
    assert abs(s2.pose.theta) == pytest.approx(math.pi, abs=1e-9)
    ex, ey, eth = fine_euler(s.pose, 1.0, 1.0, math.pi)
    assert s2.pose.x == pytest.approx(ex, abs=1e-4)
    assert s2.pose.y == pytest.approx(ey, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(
    v=st.floats(-1.0, 2.0),
    w=st.floats(-3.0, 3.0),
    theta=st.floats(-3.0, 3.0),
    dt=st.floats(0.01, 0.1),
)
def test_arc_matches_fine_euler_small_steps(v, w, theta, dt):
    pose = Pose2D(0.3, -0.2, theta)
    s2 = robot.step(RobotState(pose, Action(v, w), 0.0), Action(v, w), NO_ACCEL, dt)
    ex, ey, _ = fine_euler(pose, v, w, dt, substeps=20_000)
    assert s2.pose.x == pytest.approx(ex, abs=1e-5)
    assert s2.pose.y == pytest.approx(ey, abs=1e-5)


def test_exact_arc_equals_analytic():
    pose = Pose2D(1.0, 1.0, 0.3)
    v, w, dt = 0.8, 1.3, 0.1
    s2 = robot.step(RobotState(pose, Action(v, w), 0.0), Action(v, w), NO_ACCEL, dt)
    r = v / w
    th1 = 0.3 + w * dt
    assert s2.pose.x == pytest.approx(pose.x + r * (math.sin(th1) - math.sin(0.3)), abs=1e-15)
    assert s2.pose.y == pytest.approx(pose.y - r * (math.cos(th1) - math.cos(0.3)), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(
    v0=st.floats(-0.2, 2.0),
    w0=st.floats(-3.0, 3.0),
    cv=st.floats(-10, 10),
    cw=st.floats(-10, 10),
)
def test_velocity_continuity(v0, w0, cv, cw):
    limits = KinematicLimits(max_v=2.0, max_w=3.2, max_acc_v=2.0, max_acc_w=4.0)
    dt = 0.05
    s = RobotState(Pose2D(0, 0, 0), Action(v0, w0), 0.0)
    s2 = robot.step(s, Action(cv, cw), limits, dt)
    assert abs(s2.vel.v - v0) <= limits.max_acc_v * dt + 1e-12
    assert abs(s2.vel.w - w0) <= limits.max_acc_w * dt + 1e-12


def test_determinism():
    s = RobotState(Pose2D(0.1, 0.2, 0.3), Action(0.4, -0.5), 1.0)
    a = robot.step(s, Action(1.0, 2.0), robot.DEFAULT_LIMITS, 0.05)
    b = robot.step(s, Action(1.0, 2.0), robot.DEFAULT_LIMITS, 0.05)
    assert a == b


def test_clamp_within_limits_unchanged():
    limits = KinematicLimits(max_v=0.5, max_w=1.57)
    assert robot.clamp_action(Action(0.3, 0.5), limits) == Action(0.3, 0.5)


def test_clamp_caps_magnitudes():
    limits = KinematicLimits(max_v=0.5, max_w=1.57)
    assert robot.clamp_action(Action(9, 9), limits) == Action(0.5, 1.57)


def test_clamp_reverse_restricted_by_default():
    limits = KinematicLimits(max_v=0.5, max_w=1.57)
    clamped = robot.clamp_action(Action(-9, -9), limits)
    assert clamped.v == pytest.approx(-0.05)
    assert clamped.w == pytest.approx(-1.57)


def test_clamp_full_reverse_flag():
    limits = KinematicLimits(max_v=0.5, max_w=1.57, full_reverse=True)
    assert robot.clamp_action(Action(-9, 0), limits).v == pytest.approx(-0.5)


def test_angle_normalization():
    assert robot.normalize_angle(math.pi) == pytest.approx(math.pi)
    assert robot.normalize_angle(-math.pi) == pytest.approx(math.pi)
    assert robot.normalize_angle(3 * math.pi + 0.1) == pytest.approx(-math.pi + 0.1)
    assert Pose2D(0, 0, 4 * math.pi).theta == pytest.approx(0.0)


def test_action_rejects_non_finite():
    with pytest.raises(ValueError):
        Action(float("nan"), 0.0)
