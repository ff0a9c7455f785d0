import csv
import subprocess
import sys

import numpy as np
import pytest

from mfcswarm import cli, ppo
from mfcswarm import config as cfgmod

TINY = """
[env]
n_agents = 8
horizon = 10

[features]
points_per_axis = 2

[policy]
points_per_axis = 2
hidden = [8]

[ppo]
batch_size = 40
minibatch_size = 20
num_envs = 2
n_epochs = 1
iterations = 3
checkpoint_every = 2
lr = 0.001

[run]
seed = 4
eval_episodes = 3
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture()
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def test_missing_config_exits_2_and_names_path(tmp_path, capsys):
    p = tmp_path / "missing.toml"
    assert cli.main(["train", "--config", str(p)]) == 2
    assert str(p) in capsys.readouterr().err


def test_bad_key_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[ppo]\nlearning_rate = 1.0\n")
    assert cli.main(["train", "--config", str(p)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_writes_schema_and_is_deterministic(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(tiny), "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(tiny), "--out", str(b)]) == 0
    rows = read_csv(a / "metrics.csv")
    assert rows[0] == ppo.METRICS_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert read_csv(a / "timing.csv")[0] == cli.TIMING_COLUMNS
    assert (a / "checkpoints" / "iter_00002" / "policy.bin").exists()
    assert (a / "checkpoint" / "state.json").exists()
    assert cfgmod.load(a / "config.toml") == cfgmod.load(tiny).replace(run={"out_dir": str(a)})


def test_resume_reproduces_remaining_iterations(tiny, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    cli.main(["train", "--config", str(tiny), "--out", str(full)])
    cli.main(["train", "--config", str(tiny), "--out", str(part)])
    # restart the second run from its iteration-2 checkpoint
    ck = part / "checkpoints" / "iter_00002"
    assert cli.main(["train", "--config", str(tiny), "--out", str(part), "--checkpoint", str(ck)]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert (full / "checkpoint" / "policy.bin").read_bytes() == (part / "checkpoint" / "policy.bin").read_bytes()


def test_eval_rows_and_greedy_determinism(tiny, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--out", str(out)])
    args = ["eval", "--config", str(tiny), "--out", str(out), "--checkpoint", str(out / "checkpoint"),
            "--agents", "5,8"]
    assert cli.main(args) == 0
    rows = read_csv(out / "eval.csv")
    assert rows[0] == cli.EVAL_COLUMNS
    body = rows[1:]
    assert len(body) == 2 * (3 + 1)
    assert [r[2] for r in body if r[1] == "5"] == ["0", "1", "2", "summary"]
    first = (out / "eval.csv").read_bytes()
    cli.main(args)
    assert (out / "eval.csv").read_bytes() == first


def test_eval_shape_mismatch_exits_3(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--out", str(out)])
    other = tmp_path / "other.toml"
    other.write_text(TINY.replace("hidden = [8]", "hidden = [9]"))
    assert cli.main(["eval", "--config", str(other), "--checkpoint", str(out / "checkpoint"),
                     "--out", str(out)]) == 3
    assert "does not match" in capsys.readouterr().err


def test_openloop_modes(tiny, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--out", str(out)])
    for mode in ("replay_sequence", "freeze_t0"):
        assert cli.main(["openloop", "--config", str(tiny), "--out", str(out), "--mode", mode,
                         "--checkpoint", str(out / "checkpoint")]) == 0
        rows = read_csv(out / "openloop.csv")
        assert {r[0] for r in rows[1:]} == {"closed_loop", mode}


def test_freeze_and_replay_coincide_for_constant_policy(tiny):
    cfg = cfgmod.load(tiny)
    setup = cfg.setup()
    policy, _ = ppo.build_networks(setup, cfg.policy.hidden, 0)
    # zero weights: the mean no longer depends on the features, so xi_t is constant
    for w in policy.weights:
        w[:] = 0.0
    a = ppo.evaluate(setup, policy, 4, seed=1, mode="replay_sequence")
    b = ppo.evaluate(setup, policy, 4, seed=1, mode="freeze_t0")
    assert [r.ret for r in a] == [r.ret for r in b]


def test_bench_schema_and_counts(tmp_path):
    cfg = tmp_path / "b.toml"
    cfg.write_text("[run]\nbench_dims = [2, 5]\nbench_steps = 2\n")
    assert cli.main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert rows[0] == cli.BENCH_COLUMNS
    counts = {(r[0], r[1]): int(r[2]) for r in rows[1:]}
    assert counts == {("2", "rbf_per_axis"): 10, ("2", "histogram"): 25,
                      ("5", "rbf_per_axis"): 25, ("5", "histogram"): 3125}


def test_bench_rejects_bad_dimension(tmp_path):
    cfg = tmp_path / "b.toml"
    cfg.write_text("[run]\nbench_dims = [6]\n")
    assert cli.main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_chaos_csv(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[run]\nchaos_agents = [10, 100]\nchaos_horizon = 3\nchaos_replications = 20\n")
    assert cli.main(["chaos", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "chaos.csv")
    assert rows[0] == ["N", "t", "replication_count", "mean_l1", "mean_w1", "stderr"]
    assert len(rows) == 1 + 2 * 4


def test_export_frames_with_embedding(tiny, tmp_path):
    assert cli.main(["export-frames", "--config", str(tiny), "--out", str(tmp_path), "--embed"]) == 0
    rows = read_csv(tmp_path / "frames.csv")
    assert rows[0] == cli.FRAME_COLUMNS + ["X", "Y", "Z"]
    assert len(rows) == 1 + 11 * 8
    xyz = np.array([[float(v) for v in r[-3:]] for r in rows[1:]])
    assert np.all(np.isfinite(xyz))


def test_export_frames_box_embedding_rejected(tmp_path):
    cfg = tmp_path / "a.toml"
    cfg.write_text("[env]\nenv = \"aggregation\"\nmanifold = \"box\"\nobjective = \"aggregate\"\n")
    assert cli.main(["export-frames", "--config", str(cfg), "--out", str(tmp_path), "--embed"]) == 2


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "mfcswarm.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("train", "eval", "openloop", "chaos", "bench", "export-frames"):
        assert sub in res.stdout
