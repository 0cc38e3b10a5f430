"""Loss oracles, optimizer update rules, the training loop, checkpoints."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g2k import autodiff as ad
from g2k import data as da
from g2k import model as md
from g2k import training as tr
from g2k.config import ConfigError, TrainConfig, desk_config


def fake_run(pred):
    """KernelRun carrying given (N, T, 2) predictions as graph leaves."""
    positions = [ad.leaf(pred[:, k, :]) for k in range(pred.shape[1])]
    return md.KernelRun(positions=positions, offsets=[], diagnostics=md.Diagnostics())


def cv_batches(seeds=(1, 2, 3), n=3):
    out = []
    for s in seeds:
        sc = da.SyntheticScenario(kind="constant_velocity", n_peds=n, seed=s,
                                  obs_len=3, pred_len=2)
        out.extend(da.synthesize(sc))
    return out


def targets_of(batches):
    return [da.target_positions(b) for b in batches]


# ---------------------------------------------------------------------------
# loss


def test_loss_identity_is_zero():
    pred = np.random.default_rng(0).normal(size=(3, 2, 2))
    gt = np.transpose(pred, (1, 0, 2))  # loss_graph targets are (T, N, 2)
    loss = tr.loss_graph(fake_run(pred), gt)
    assert loss.data[0, 0] == 0.0


def test_loss_unit_offset_is_exactly_one():
    # constant 1 m offset at every step, any N: mean reduction gives 1.0 exact
    gt = np.zeros((2, 1, 2))
    pred = np.zeros((1, 2, 2))
    pred[..., 0] = 1.0
    loss = tr.loss_graph(fake_run(pred), gt)
    assert loss.data[0, 0] == 1.0


def test_loss_matches_hand_summation():
    rng = np.random.default_rng(5)
    pred = rng.normal(size=(4, 3, 2))
    gt = rng.normal(size=(3, 4, 2))
    loss = float(tr.loss_graph(fake_run(pred), gt).data[0, 0])
    total = 0.0
    for k in range(3):
        for i in range(4):
            dx = pred[i, k, 0] - gt[k, i, 0]
            dy = pred[i, k, 1] - gt[k, i, 1]
            total += dx * dx + dy * dy
    assert abs(loss - total / (4 * 3)) < 1e-12


def test_loss_value_agrees_with_graph():
    rng = np.random.default_rng(9)
    pred = rng.normal(size=(5, 4, 2))
    gt = rng.normal(size=(5, 4, 2))
    via_graph = float(tr.loss_graph(fake_run(pred), np.transpose(gt, (1, 0, 2))).data[0, 0])
    assert abs(via_graph - tr.loss_value(pred, gt)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=999))
def test_loss_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(n, 3, 2))
    gt = rng.normal(size=(n, 3, 2))
    perm = rng.permutation(n)
    assert abs(tr.loss_value(pred, gt) - tr.loss_value(pred[perm], gt[perm])) < 1e-12


def test_loss_shape_mismatch_raises():
    with pytest.raises(ConfigError):
        tr.loss_graph(fake_run(np.zeros((2, 3, 2))), np.zeros((2, 2, 2)))
    with pytest.raises(ConfigError):
        tr.loss_value(np.zeros((2, 3, 2)), np.zeros((3, 3, 2)))


# ---------------------------------------------------------------------------
# optimizers


def toy_params(values, grads):
    ps = ad.ParameterSet()
    for i, (v, g) in enumerate(zip(values, grads)):
        p = ps.register(f"p{i}", np.array(v, dtype=float))
        p.value.grad = np.array(g, dtype=float)
    return ps


def test_sgd_step():
    ps = toy_params([[[1.0, 2.0]]], [[[0.5, -1.0]]])
    tr.SGD(lr=0.1).step(ps)
    assert np.allclose(ps["p0"].value.data, [[0.95, 2.1]], atol=1e-15)


def test_adam_first_step_closed_form():
    g = np.array([[0.3, -2.0, 1e-6]])
    ps = toy_params([np.zeros((1, 3))], [g])
    opt = tr.Adam(lr=0.01)
    opt.step(ps)
    expect = -0.01 * g / (np.sqrt(g * g) + 1e-8)
    assert np.max(np.abs(ps["p0"].value.data - expect)) < 1e-12


def test_adam_zero_gradient_no_update():
    ps = toy_params([[[1.0, -3.0]]], [np.zeros((1, 2))])
    opt = tr.Adam(lr=0.5)
    for _ in range(3):
        opt.step(ps)
    assert np.array_equal(ps["p0"].value.data, [[1.0, -3.0]])


def test_adam_matches_scripted_oracle():
    # independent reimplementation of the update, run for 50 constant-grad steps
    g = np.array([[0.7, -0.2]])
    ps = toy_params([np.zeros((1, 2))], [g])
    opt = tr.Adam(lr=0.01)
    x = np.zeros((1, 2))
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, 51):
        opt.step(ps)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ps["p0"].value.grad = g.copy()
    assert np.max(np.abs(ps["p0"].value.data - x)) < 1e-12
    # constant gradient drives near-constant steps of size ~lr in each coord
    steps = np.abs(x / 50)
    assert np.all(steps > 0.008) and np.all(steps < 0.0102)


def test_clip_gradients_scales_to_norm():
    ps = toy_params([[[0.0, 0.0]], [[0.0]]], [[[3.0, 0.0]], [[4.0]]])
    norm = tr.clip_gradients(ps, clip_norm=1.0)
    assert abs(norm - 5.0) < 1e-12
    clipped = math.sqrt(sum(float((p.value.grad ** 2).sum()) for p in ps))
    assert abs(clipped - 1.0) < 1e-12


def test_clip_gradients_noop_below_threshold():
    ps = toy_params([[[0.0]]], [[[0.5]]])
    norm = tr.clip_gradients(ps, clip_norm=10.0)
    assert abs(norm - 0.5) < 1e-12
    assert ps["p0"].value.grad[0, 0] == 0.5


# ---------------------------------------------------------------------------
# training loop


def test_zero_learning_rate_is_null_update():
    batches = cv_batches()
    mc = desk_config("g_lstm")
    tc = TrainConfig(epochs=2, batch_size=2, lr=0.0, optimizer="sgd", seed=3)
    res = tr.train(batches, mc, tc)
    fresh = md.TrajectoryModel(desk_config("g_lstm"), seed=3)
    for name, arr in res.model.params.state().items():
        assert np.array_equal(arr, fresh.params.state()[name]), name


def test_empty_batches_rejected():
    with pytest.raises(ConfigError):
        tr.train([], desk_config("g_lstm"), TrainConfig())


def test_history_and_log_shape():
    batches = cv_batches()
    tc = TrainConfig(epochs=3, batch_size=2, lr=0.01, optimizer="sgd", seed=0)
    res = tr.train(batches, desk_config("g_lstm"), tc)
    assert len(res.history) == 3
    step_lines = [l for l in res.log.lines if "wall_ms=" in l]
    assert len(step_lines) == 3 * 2  # 3 batches in groups of 2 -> 2 steps/epoch
    assert all("loss=" in l for l in step_lines)


def test_divergence_aborts_with_history():
    bad = cv_batches(seeds=(1,))[0]
    w = bad.windows[0]
    w.target[0] = dataclasses.replace(w.target[0], x=float("nan"))
    with pytest.raises(tr.DivergenceError) as exc:
        tr.train([bad], desk_config("g_lstm"),
                 TrainConfig(epochs=1, batch_size=1, lr=0.01, seed=0))
    assert exc.value.epoch == 0
    assert "not finite" in str(exc.value)


def test_sgd_loss_monotone_after_warmup():
    batches = cv_batches()
    tc = TrainConfig(epochs=25, batch_size=4, lr=0.3, optimizer="sgd", seed=3)
    res = tr.train(batches, desk_config("g_lstm"), tc)
    h = res.history
    assert h[-1] < h[0]
    for i in range(3, len(h) - 1):
        assert h[i + 1] <= h[i] + 1e-6, (i, h[i], h[i + 1])


def test_gradient_accumulation_is_group_mean():
    batches = cv_batches(seeds=(1, 2))
    targets = targets_of(batches)
    model = md.TrajectoryModel(desk_config("mcr_n"), seed=4)

    singles = []
    for b, t in zip(batches, targets):
        model.params.zero_grad()
        ad.backward(tr.loss_graph(model.run(b), t))
        singles.append({p.name: p.value.grad.copy() for p in model.params})

    model.params.zero_grad()
    for b, t in zip(batches, targets):
        ad.backward(ad.scale(tr.loss_graph(model.run(b), t), 0.5))
    for p in model.params:
        want = 0.5 * (singles[0][p.name] + singles[1][p.name])
        assert np.max(np.abs(p.value.grad - want)) < 1e-14, p.name


# ---------------------------------------------------------------------------
# checkpoints


def mkdir(base, name):
    d = base / name
    d.mkdir(exist_ok=True)
    return d


def trained_pair(tmp_path, seed=5, epochs=2):
    batches = cv_batches()
    mc = desk_config("mcr_n")
    tc = TrainConfig(epochs=epochs, batch_size=2, lr=0.01, seed=seed)
    res = tr.train(batches, mc, tc)
    path = str(tmp_path / f"ckpt_{seed}.txt")
    tr.save_checkpoint(path, res.model, tc, epochs, res.history)
    return res, tc, path


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    res, tc, path = trained_pair(tmp_path)
    ck = tr.load_checkpoint(path)
    assert ck.epoch == 2
    assert ck.history == res.history
    assert ck.train_cfg == tc
    assert ck.model_cfg == res.model.cfg
    for name, arr in res.model.params.state().items():
        assert np.array_equal(ck.state[name], arr), name
    batch = cv_batches(seeds=(9,))[0]
    before = res.model.run(batch).predictions
    after = ck.restore().run(batch).predictions
    assert np.array_equal(before, after)


def test_same_seed_bit_identical_checkpoints(tmp_path):
    _, _, p1 = trained_pair(mkdir(tmp_path, "a"), seed=5)
    _, _, p2 = trained_pair(mkdir(tmp_path, "b"), seed=5)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_different_seed_differs(tmp_path):
    r1, _, _ = trained_pair(mkdir(tmp_path, "a"), seed=5, epochs=1)
    r2, _, _ = trained_pair(mkdir(tmp_path, "b"), seed=6, epochs=1)
    s1, s2 = r1.model.params.state(), r2.model.params.state()
    assert any(not np.array_equal(s1[n], s2[n]) for n in s1)


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.txt")
    with open(path, "w") as fh:
        fh.write("not-a-checkpoint\n")
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(path)


def test_checkpoint_tampered_config_hash_mismatch(tmp_path):
    _, _, path = trained_pair(tmp_path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    idx = next(i for i, l in enumerate(lines) if l.startswith("model.hidden_size"))
    lines[idx] = "model.hidden_size 999"
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with pytest.raises(tr.CheckpointError, match="hash"):
        tr.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    _, _, path = trained_pair(tmp_path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    with open(path, "w") as fh:
        fh.write("\n".join(lines[: len(lines) // 2]) + "\n")
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(path)


def test_train_log_write(tmp_path):
    log = tr.TrainLog()
    log.record(epoch=0, batch=1, loss="0.5", wall_ms="1.2")
    path = tmp_path / "log.txt"
    log.write(str(path))
    assert path.read_text() == "epoch=0 batch=1 loss=0.5 wall_ms=1.2\n"
