"""End-to-end subcommand behavior via entry(), including exit codes."""

import numpy as np
import pytest

from g2k import data as da
from g2k import training as tr
from g2k.cli import entry

DESK_CFG = """\
hidden_size = 8
num_blocks = 2
block_skip = 2
cell_units = 2
embed_pos = 4
embed_vis = 4
feature_dim = 4
zones = 4
grid_size = 2
cell_channels = 4
static_input_dim = 8
static_hidden = 8
obs_len = 3
pred_len = 2
neighborhood_size = 8
epochs = 3
batch_size = 2
lr = 0.01
"""

WALK_CFG = """\
kind = group_walk
n_peds = 3
seed = 11
obs_len = 3
pred_len = 2
"""


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.delenv("G2K_SEED", raising=False)
    (tmp_path / "desk.cfg").write_text(DESK_CFG)
    (tmp_path / "walk.cfg").write_text(WALK_CFG)
    return tmp_path


def run_train(ws, *extra, variant="mcr_n", out="run"):
    argv = ["train", "--variant", variant, "--config", str(ws / "desk.cfg"),
            "--scenario", str(ws / "walk.cfg"), "--out", str(ws / out)]
    return entry(argv + list(extra))


# ---------------------------------------------------------------------------
# train


def test_train_writes_ckpt_and_log(ws):
    assert run_train(ws, "--seed", "7") == 0
    ck = tr.load_checkpoint(str(ws / "run" / "ckpt"))
    assert ck.epoch == 3
    assert len(ck.history) == 3
    assert ck.train_cfg.seed == 7
    log = (ws / "run" / "log").read_text()
    assert "loss=" in log and "wall_ms=" in log


def test_train_missing_variant_is_usage_error(ws, capsys):
    code = entry(["train", "--scenario", str(ws / "walk.cfg"),
                  "--out", str(ws / "x")])
    capsys.readouterr()
    assert code == 2


def test_train_unknown_config_key(ws):
    (ws / "bad.cfg").write_text("hidden_size = 8\nwat = 1\n")
    code = entry(["train", "--variant", "g_lstm", "--config", str(ws / "bad.cfg"),
                  "--scenario", str(ws / "walk.cfg"), "--out", str(ws / "x")])
    assert code == 2


def test_train_window_mismatch(ws):
    # scenario carries 3/2 windows, model defaults expect 8/12
    code = entry(["train", "--variant", "g_lstm",
                  "--scenario", str(ws / "walk.cfg"), "--out", str(ws / "x")])
    assert code == 2


def test_train_divergence_exits_3(ws, capsys):
    code = run_train(ws, "--optimizer", "sgd", "--lr", "1e12", "--epochs", "20",
                     variant="g_lstm")
    err = capsys.readouterr().err
    assert code == 3
    assert "not finite" in err


def test_flag_beats_config_file(ws):
    assert run_train(ws, "--epochs", "2") == 0
    ck = tr.load_checkpoint(str(ws / "run" / "ckpt"))
    assert len(ck.history) == 2
    assert ck.model_cfg.hidden_size == 8  # file value survives


def test_env_seed_beats_flag(ws, monkeypatch):
    monkeypatch.setenv("G2K_SEED", "99")
    assert run_train(ws, "--seed", "1", out="a") == 0
    assert run_train(ws, "--seed", "2", out="b") == 0
    assert (ws / "a" / "ckpt").read_bytes() == (ws / "b" / "ckpt").read_bytes()
    assert tr.load_checkpoint(str(ws / "a" / "ckpt")).train_cfg.seed == 99


def test_train_from_tsv_dataset(ws):
    assert entry(["synth", "--scenario", str(ws / "walk.cfg"),
                  "--out", str(ws / "walk.tsv")]) == 0
    code = entry(["train", "--variant", "g_lstm", "--config", str(ws / "desk.cfg"),
                  "--dataset", str(ws / "walk.tsv"), "--out", str(ws / "run")])
    assert code == 0


# ---------------------------------------------------------------------------
# eval


def test_eval_reports_and_csv_deterministic(ws, capsys):
    run_train(ws, "--seed", "7")
    argv = ["eval", "--ckpt", str(ws / "run" / "ckpt"),
            "--scenario", str(ws / "walk.cfg"), "--out", str(ws / "r.csv")]
    assert entry(argv) == 0
    out1 = capsys.readouterr().out
    assert "ADE(m)" in out1 and "runtime" in out1
    csv1 = (ws / "r.csv").read_bytes()
    assert entry(argv) == 0
    capsys.readouterr()
    assert (ws / "r.csv").read_bytes() == csv1
    assert b"runtime" not in csv1


def test_eval_baseline_needs_no_ckpt(ws, capsys):
    code = entry(["eval", "--baseline", "--scenario", str(ws / "walk.cfg")])
    out = capsys.readouterr().out
    assert code == 0
    assert "constant_velocity" in out


def test_eval_flag_mismatch_exits_4(ws, capsys):
    run_train(ws, "--seed", "7")
    code = entry(["eval", "--ckpt", str(ws / "run" / "ckpt"),
                  "--scenario", str(ws / "walk.cfg"), "--grid-size", "4"])
    err = capsys.readouterr().err
    assert code == 4
    assert "mismatch" in err


def test_eval_matching_flag_passes(ws, capsys):
    run_train(ws, "--seed", "7")
    code = entry(["eval", "--ckpt", str(ws / "run" / "ckpt"),
                  "--scenario", str(ws / "walk.cfg"), "--grid-size", "2"])
    capsys.readouterr()
    assert code == 0


def test_eval_missing_ckpt_file(ws, capsys):
    code = entry(["eval", "--ckpt", str(ws / "nope"),
                  "--scenario", str(ws / "walk.cfg")])
    capsys.readouterr()
    assert code == 2


def test_eval_corrupt_ckpt_exits_4(ws, capsys):
    run_train(ws, "--seed", "7")
    path = ws / "run" / "ckpt"
    lines = path.read_text().splitlines()
    idx = next(i for i, l in enumerate(lines) if l.startswith("model.hidden_size"))
    lines[idx] = "model.hidden_size 4"
    path.write_text("\n".join(lines) + "\n")
    code = entry(["eval", "--ckpt", str(path),
                  "--scenario", str(ws / "walk.cfg")])
    err = capsys.readouterr().err
    assert code == 4
    assert "hash" in err


# ---------------------------------------------------------------------------
# viz


def read_csv_matrix(path):
    rows = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split(",")])
    return np.array(rows)


def test_viz_exports(ws, capsys):
    run_train(ws, "--seed", "7", variant="mcr_mp")
    argv = ["viz", "--ckpt", str(ws / "run" / "ckpt"),
            "--scenario", str(ws / "walk.cfg"), "--scene", "0",
            "--out", str(ws / "viz")]
    assert entry(argv) == 0
    capsys.readouterr()

    adj = read_csv_matrix(ws / "viz" / "adjacency.csv")
    assert adj.shape == (3, 3)
    assert np.max(np.abs(adj.sum(axis=1) - 1.0)) < 1e-9

    att = read_csv_matrix(ws / "viz" / "attention.csv")
    assert att.shape == (3, 4)  # zones columns
    assert np.max(np.abs(att.sum(axis=1) - 1.0)) < 1e-9

    assert "# config" in (ws / "viz" / "adjacency.csv").read_text()

    img = da.read_pgm(str(ws / "viz" / "grid.pgm"))
    assert img.shape == (2, 2)


def test_viz_deterministic(ws, capsys):
    run_train(ws, "--seed", "7", variant="mcr_mp")
    argv = ["viz", "--ckpt", str(ws / "run" / "ckpt"),
            "--scenario", str(ws / "walk.cfg"), "--out", str(ws / "viz")]
    assert entry(argv) == 0
    first = {f: (ws / "viz" / f).read_bytes()
             for f in ("adjacency.csv", "attention.csv", "grid.csv", "grid.pgm")}
    assert entry(argv) == 0
    capsys.readouterr()
    for f, blob in first.items():
        assert (ws / "viz" / f).read_bytes() == blob, f


def test_viz_scene_out_of_range(ws, capsys):
    run_train(ws, "--seed", "7")
    code = entry(["viz", "--ckpt", str(ws / "run" / "ckpt"),
                  "--scenario", str(ws / "walk.cfg"), "--scene", "9",
                  "--out", str(ws / "viz")])
    err = capsys.readouterr().err
    assert code == 2
    assert "out of range" in err


def test_viz_needs_relational_variant(ws, capsys):
    run_train(ws, "--seed", "7", variant="g_lstm", out="glstm")
    code = entry(["viz", "--ckpt", str(ws / "glstm" / "ckpt"),
                  "--scenario", str(ws / "walk.cfg"), "--out", str(ws / "viz")])
    err = capsys.readouterr().err
    assert code == 2
    assert "adjacency" in err


# ---------------------------------------------------------------------------
# gradcheck, synth


def test_gradcheck_passes_for_g_lstm(capsys):
    assert entry(["gradcheck", "--variant", "g_lstm"]) == 0
    out = capsys.readouterr().out
    assert "worst=" in out


def test_gradcheck_rejects_bogus_variant(capsys):
    code = entry(["gradcheck", "--variant", "bogus"])
    capsys.readouterr()
    assert code == 2


def test_synth_roundtrip(ws, capsys):
    path = ws / "walk.tsv"
    assert entry(["synth", "--scenario", str(ws / "walk.cfg"),
                  "--out", str(path)]) == 0
    capsys.readouterr()
    points = da.load_dataset(str(path))
    sc = da.load_scenario(str(ws / "walk.cfg"))
    assert points == da.scenario_points(sc)
