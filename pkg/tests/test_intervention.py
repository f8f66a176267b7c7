import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navtune import intervention as iv
from navtune import teleop, world
from navtune.nav import PlannerInput
from navtune.robot import SIM_DT, Action, Pose2D, RobotState

from conftest import make_gap_grid


def open_session(seed=0, width=30):
    cells = np.zeros((30, width), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    grid = world.OccupancyGrid(width, 30, 0.15, cells)
    return teleop.TeleopSession(teleop.SessionConfig(grid=grid, seed=seed, env_name="open"))


def drive_session(session, seconds):
    for _ in range(int(round(seconds / SIM_DT))):
        session.step()


# --------------------------------------------------------------------------
# Trace ring and rewind
# --------------------------------------------------------------------------


def test_rewind_to_current_time_is_identity():
    s = open_session()
    s.handle({"kind": "start"})
    drive_session(s, 2.0)
    s.handle({"kind": "pause"})
    pose_before = s.state.pose
    tick_before = s.tick
    frames = s.handle({"kind": "rewind_to", "t": s.tick * SIM_DT})
    assert frames[0]["kind"] == "state"
    assert s.tick == tick_before
    assert s.state.pose == pose_before


def test_rewind_and_replay_is_bit_identical():
    a = open_session()
    a.handle({"kind": "start"})
    drive_session(a, 4.0)
    poses_first = []
    for _ in range(40):
        a.step()
        poses_first.append(a.state)
    a.handle({"kind": "pause"})
    a.handle({"kind": "rewind_to", "t": 4.0})
    a.handle({"kind": "start"})
    poses_second = []
    for _ in range(40):
        a.step()
        poses_second.append(a.state)
    assert poses_first == poses_second


def test_rewind_twice_restores_identical_state():
    s = open_session()
    s.handle({"kind": "start"})
    drive_session(s, 3.0)
    s.handle({"kind": "pause"})
    s.handle({"kind": "rewind_to", "t": 1.0})
    state_a = (s.state, s.controller, s.rng.bit_generator.state)
    # diverge with different commands, then rewind again to the same point
    s.handle({"kind": "start"})
    s.handle({"kind": "take_control"})
    s.handle({"kind": "drive", "v": 0.4, "w": 0.5})
    drive_session(s, 0.8)
    s.handle({"kind": "pause"})
    s.handle({"kind": "rewind_to", "t": 1.0})
    state_b = (s.state, s.controller, s.rng.bit_generator.state)
    assert state_a == state_b


def test_rewind_outside_ring_errors():
    s = open_session()
    s.handle({"kind": "start"})
    drive_session(s, 1.0)
    s.handle({"kind": "pause"})
    frames = s.handle({"kind": "rewind_to", "t": 99.0})
    assert frames[0]["kind"] == "error"
    assert "outside ring" in frames[0]["payload"]["message"]


def test_ring_capacity_drops_oldest():
    trace = iv.SimTrace(capacity=10)
    state = RobotState(Pose2D(0, 0, 0), Action(0, 0), 0.0)
    for tick in range(25):
        trace.append(
            iv.SimSnapshot(tick, state, Action(0, 0), None, {"bit_generator": "x", "state": {}})
        )
    assert len(trace) == 10
    assert trace.ticks == (15, 24)
    with pytest.raises(iv.OutOfWindowError):
        trace.snapshot_at(14)


@settings(max_examples=12, deadline=None)
@given(
    seed=st.integers(0, 40),
    run_a=st.floats(1.0, 3.0),
    rewind_frac=st.floats(0.1, 0.9),
    cmds=st.lists(st.tuples(st.floats(-0.3, 0.6), st.floats(-1.5, 1.5)), min_size=1, max_size=4),
)
def test_rewind_replay_property(seed, run_a, rewind_frac, cmds):
    s = open_session(seed=seed)
    s.handle({"kind": "start"})
    drive_session(s, run_a)
    s.handle({"kind": "pause"})
    t_target = round(rewind_frac * s.tick) * SIM_DT
    s.handle({"kind": "rewind_to", "t": t_target})
    s.handle({"kind": "start"})
    s.handle({"kind": "take_control"})

    def run_script(session):
        out = []
        for v, w in cmds:
            session.handle({"kind": "drive", "v": v, "w": w})
            for _ in range(10):
                session.step()
                out.append(session.state)
        return out

    first = run_script(s)
    s.handle({"kind": "pause"})
    s.handle({"kind": "rewind_to", "t": t_target})
    s.handle({"kind": "start"})
    s.handle({"kind": "take_control"})
    second = run_script(s)
    assert first == second


# --------------------------------------------------------------------------
# Capture
# --------------------------------------------------------------------------


def full_capture_session(span_s=3.0):
    s = open_session()
    s.handle({"kind": "start"})
    drive_session(s, 1.0)
    s.handle({"kind": "take_control"})
    s.handle({"kind": "mark_begin"})
    s.handle({"kind": "drive", "v": 0.3, "w": 0.0})
    drive_session(s, span_s)
    s.handle({"kind": "mark_end", "itype": "A"})
    frames = s.handle({"kind": "save_record"})
    return s, frames


def test_capture_three_seconds_is_thirty_steps():
    s, frames = full_capture_session(3.0)
    assert frames[0]["kind"] == "record_ack"
    assert frames[0]["payload"] == {"context_id": 1, "itype": "A", "steps": 30}
    record = s.records[0]
    assert len(record.steps) == 30
    times = [x.state.t for x, _ in record.steps]
    assert all(b > a for a, b in zip(times, times[1:]))


def test_capture_ids_sequential():
    s, _ = full_capture_session(2.0)
    s.handle({"kind": "mark_begin"})
    drive_session(s, 1.0)
    s.handle({"kind": "mark_end", "itype": "B"})
    frames = s.handle({"kind": "save_record"})
    assert frames[0]["payload"]["context_id"] == 2
    assert [r.context_id for r in s.records] == [1, 2]
    assert s.records[1].itype is iv.InterventionType.TYPE_B


def test_capture_spanning_rewind_boundary_errors():
    s = open_session()
    s.handle({"kind": "start"})
    drive_session(s, 4.0)
    s.handle({"kind": "pause"})
    s.handle({"kind": "rewind_to", "t": 2.0})
    with pytest.raises(iv.InvalidSpanError):
        s.trace.capture(1.0, 3.5, iv.InterventionType.TYPE_A, 1)


def test_capture_empty_span_errors():
    s = open_session()
    s.handle({"kind": "start"})
    drive_session(s, 1.0)
    with pytest.raises(iv.InvalidSpanError):
        s.trace.capture(0.5, 0.5, iv.InterventionType.TYPE_A, 1)


# --------------------------------------------------------------------------
# Dataset assembly
# --------------------------------------------------------------------------


def make_record(context_id, n_steps, itype=iv.InterventionType.TYPE_A, t0=0.0):
    steps = []
    for i in range(n_steps):
        state = RobotState(Pose2D(0.5, 0.5, 0), Action(0, 0), t0 + 0.1 * (i + 1))
        x = PlannerInput(state, None, np.array([[0.5, 0.5]]), (1.0, 1.0), (1.0, 1.0))
        steps.append((x, Action(0.1, 0.0)))
    return iv.InterventionRecord(context_id, itype, tuple(steps))


def test_build_dataset_single_record():
    ds = iv.build_dataset([make_record(1, 30)])
    assert ds.context_count == 1
    assert len(ds.items) == 30
    assert {label for _, label in ds.items} == {1}


def test_build_dataset_two_records():
    ds = iv.build_dataset([make_record(1, 30), make_record(2, 50)])
    assert ds.context_count == 2
    assert len(ds.items) == 80
    counts = {}
    for _, label in ds.items:
        counts[label] = counts.get(label, 0) + 1
    assert counts == {1: 30, 2: 50}


def test_build_dataset_empty_errors():
    with pytest.raises(ValueError):
        iv.build_dataset([])


def test_dataset_label_partition():
    records = [make_record(i + 1, 10 + i) for i in range(3)]
    ds = iv.build_dataset(records)
    offset = 0
    for i, record in enumerate(records, start=1):
        for j in range(len(record.steps)):
            x, label = ds.items[offset + j]
            assert label == i
            assert x is record.steps[j][0]
        offset += len(record.steps)


def test_record_validation():
    with pytest.raises(ValueError):
        iv.InterventionRecord(0, iv.InterventionType.TYPE_A, (make_record(1, 1).steps[0],))
    with pytest.raises(ValueError):
        iv.InterventionRecord(1, iv.InterventionType.TYPE_A, ())
    a = make_record(1, 2)
    with pytest.raises(ValueError):
        iv.InterventionRecord(1, iv.InterventionType.TYPE_A, (a.steps[1], a.steps[0]))


# --------------------------------------------------------------------------
# Log format
# --------------------------------------------------------------------------


def test_log_round_trip_is_byte_identical():
    s, _ = full_capture_session(2.0)
    record = s.records[0]
    text = iv.record_to_log(record)
    parsed = iv.record_from_log(text)
    assert iv.record_to_log(parsed) == text
    assert parsed.context_id == record.context_id
    assert parsed.itype == record.itype
    assert len(parsed.steps) == len(record.steps)
    for (xa, aa), (xb, ab) in zip(parsed.steps, record.steps):
        assert aa == ab
        assert xa.state == xb.state
        np.testing.assert_array_equal(xa.scan.ranges, xb.scan.ranges)


def test_log_header_fields():
    s, _ = full_capture_session(1.0)
    text = iv.record_to_log(s.records[0])
    import json

    header = json.loads(text.splitlines()[0])
    assert set(header) == {"context_id", "itype", "env_file", "seed"}
    step_row = json.loads(text.splitlines()[1])
    assert set(step_row) == {"t", "pose", "vel", "scan", "local_goal", "action"}


def test_log_rejects_empty():
    with pytest.raises(ValueError):
        iv.record_from_log("")
