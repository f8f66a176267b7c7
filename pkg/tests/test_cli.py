import json
import os

import numpy as np
import pytest

from navtune import cli, teleop, world
from navtune.intervention import record_to_log
from navtune.learn import parse_parameter_map
from navtune.pipeline import read_policy


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """An environment file plus two teleop-captured intervention logs."""
    root = tmp_path_factory.mktemp("cli")
    cells = np.zeros((30, 30), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    grid = world.OccupancyGrid(30, 30, 0.15, cells)
    env_path = root / "room.grid"
    world.save_grid(grid, str(env_path))

    session = teleop.TeleopSession(
        teleop.SessionConfig(grid=grid, seed=1, env_name="room.grid")
    )
    session.handle({"kind": "start"})
    for _ in range(20):
        session.step()
    session.handle({"kind": "take_control"})
    for i, (v, w, itype) in enumerate(((0.3, 0.0, "A"), (0.5, 0.3, "B"))):
        session.handle({"kind": "mark_begin"})
        session.handle({"kind": "drive", "v": v, "w": w})
        for _ in range(24):
            session.step()
        session.handle({"kind": "mark_end", "itype": itype})
        session.handle({"kind": "save_record"})
    logs = []
    for record in session.records:
        path = root / f"log_{record.context_id}.jsonl"
        path.write_text(record_to_log(record))
        logs.append(str(path))
    return {"root": root, "env": str(env_path), "logs": logs}


def test_fit_writes_parameter_map(workspace):
    out = str(workspace["root"] / "params.map")
    rc = cli.main(
        ["fit", *workspace["logs"], "--env-dir", str(workspace["root"]), "--out", out, "--budget", "48"]
    )
    assert rc == 0
    entries = parse_parameter_map(open(out).read())
    assert sorted(entries) == [0, 1, 2]
    assert entries[0].max_vel_x == 0.5  # context 0 pinned to the default


def test_train_clf_writes_blob(workspace):
    out = str(workspace["root"] / "clf.json")
    rc = cli.main(
        ["train-clf", *workspace["logs"], "--env-dir", str(workspace["root"]), "--out", out]
    )
    assert rc == 0
    blob = json.loads(open(out).read())
    assert blob["format"] == "evidential-net"
    assert blob["layer_sizes"][-1] == 2


def test_train_and_deploy_round_trip(workspace):
    policy_path = str(workspace["root"] / "policy.json")
    rc = cli.main(
        [
            "train",
            *workspace["logs"],
            "--env-dir",
            str(workspace["root"]),
            "--out",
            policy_path,
            "--budget",
            "48",
        ]
    )
    assert rc == 0
    policy = read_policy(policy_path)
    assert policy.pmap.n_contexts == 2
    assert policy.predictor.epsilon_u == 0.8

    log_path = str(workspace["root"] / "episode.jsonl")
    rc = cli.main(["deploy", workspace["env"], "--policy", policy_path, "--out", log_path])
    assert rc == 0
    rows = [json.loads(ln) for ln in open(log_path)]
    assert rows
    assert set(rows[0]) == {"t", "pose", "action", "context", "confidence"}


def test_deploy_default_parameters(workspace):
    log_path = str(workspace["root"] / "episode_default.jsonl")
    rc = cli.main(["deploy", workspace["env"], "--out", log_path])
    assert rc == 0
    assert os.path.exists(log_path)


def test_gen_env(workspace, tmp_path):
    out = str(tmp_path / "gen.grid")
    rc = cli.main(["gen-env", "--seed", "5", "--out", out])
    assert rc == 0
    grid = world.read_grid(out)
    assert grid.width == 30


def test_bench_gen_small(tmp_path):
    out = str(tmp_path / "suite")
    rc = cli.main(["bench", "gen", "--n", "3", "--seed", "4", "--out", out])
    assert rc == 0
    manifest = json.loads(open(os.path.join(out, "suite.json")).read())
    assert len(manifest) == 3
    for row in manifest:
        assert os.path.exists(os.path.join(out, row["file"]))
