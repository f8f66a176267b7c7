import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from navtune import server, teleop, world


def open_grid():
    cells = np.zeros((30, 30), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    return world.OccupancyGrid(30, 30, 0.15, cells)


@pytest.fixture
def client(tmp_path):
    config = teleop.SessionConfig(grid=open_grid(), seed=2, env_name="room")
    # max-speed headless mode for tests
    app = server.create_app(config, log_dir=str(tmp_path), speed=200.0)
    with TestClient(app) as tc:
        yield tc


def recv_until(ws, kind, limit=200):
    for _ in range(limit):
        frame = json.loads(ws.receive_text())
        if frame["kind"] == kind:
            return frame
    raise AssertionError(f"no {kind} frame within {limit} messages")


def test_health_endpoint(client):
    body = client.get("/health").json()
    assert body["ok"] is True


def test_index_serves_page(client):
    response = client.get("/")
    assert response.status_code == 200


def test_hello_then_state_frames(client):
    with client.websocket_connect("/ws") as ws:
        hello = json.loads(ws.receive_text())
        assert hello["kind"] == "status"
        assert hello["payload"]["protocol"] == teleop.PROTOCOL_VERSION
        first_state = json.loads(ws.receive_text())
        assert first_state["kind"] == "state"
        ws.send_text(json.dumps({"kind": "start"}))
        frame = recv_until(ws, "state")
        assert frame["payload"]["running"] is True


def test_malformed_frame_keeps_connection(client):
    with client.websocket_connect("/ws") as ws:
        recv_until(ws, "state")
        ws.send_text("this is not json")
        err = recv_until(ws, "error")
        assert "malformed" in err["payload"]["message"]
        ws.send_text(json.dumps({"kind": "start"}))
        assert recv_until(ws, "state")["payload"]["running"] is True


def test_control_token_single_holder(client):
    with client.websocket_connect("/ws") as a, client.websocket_connect("/ws") as b:
        recv_until(a, "state")
        recv_until(b, "state")
        a.send_text(json.dumps({"kind": "take_control"}))
        recv_until(a, "state")
        b.send_text(json.dumps({"kind": "take_control"}))
        err = recv_until(b, "error")
        assert "token" in err["payload"]["message"]
        b.send_text(json.dumps({"kind": "drive", "v": 0.2, "w": 0.0}))
        err = recv_until(b, "error")
        assert "token" in err["payload"]["message"]


def test_record_saved_to_log_dir(client, tmp_path):
    with client.websocket_connect("/ws") as ws:
        recv_until(ws, "state")
        for cmd in (
            {"kind": "start"},
            {"kind": "take_control"},
            {"kind": "mark_begin"},
            {"kind": "drive", "v": 0.3, "w": 0.0},
        ):
            ws.send_text(json.dumps(cmd))
        deadline = time.time() + 10
        while time.time() < deadline:
            frame = json.loads(ws.receive_text())
            if frame["kind"] == "state" and frame["payload"]["t"] >= 2.0:
                break
        ws.send_text(json.dumps({"kind": "mark_end", "itype": "A"}))
        ws.send_text(json.dumps({"kind": "save_record"}))
        ack = recv_until(ws, "record_ack", limit=400)
        assert ack["payload"]["itype"] == "A"
        assert ack["payload"]["context_id"] == 1
    deadline = time.time() + 5
    while time.time() < deadline:
        files = list(tmp_path.glob("intervention_*.jsonl"))
        if files:
            break
        time.sleep(0.05)
    assert files, "record log not written"
    from navtune.intervention import record_from_log

    record = record_from_log(files[0].read_text())
    assert record.itype.value == "A"
    assert len(record.steps) >= 5
