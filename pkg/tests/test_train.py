import json
import struct
import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import tensor as T
import train as train_module
from tensor import Tensor
from config import TrainConfig, model_preset
from data import synth_generate
from dcgct import CHECKPOINT_MAGIC, CheckpointError, DatasetError, GradientError, NumericalError
from model import DCGCT, init_params
from skeleton import flip_pose
from train import (
    BATCH_THREAD_NAME, OptimizerState, _epoch_batches, _prepare_batch, augment_batch, collect_grads,
    load_checkpoint, lr_at_epoch, optimizer_step, save_checkpoint, train, weighted_pose_loss,
)


def test_lr_schedule():
    cfg = TrainConfig(lr0=1e-3)
    assert lr_at_epoch(0, cfg) == pytest.approx(1e-3)
    assert lr_at_epoch(4, cfg) == pytest.approx(1e-3 * 0.95 ** 4)
    assert lr_at_epoch(5, cfg) == pytest.approx(1e-3 * 0.95 ** 5 * 0.5)
    assert lr_at_epoch(12, cfg) == pytest.approx(1e-3 * 0.95 ** 12 * 0.25)


def test_default_lr_depends_on_arity():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg, frames=1) == pytest.approx(5e-4)
    assert lr_at_epoch(0, cfg, frames=9) == pytest.approx(1e-3)


def test_adam_scalar_step():
    p = {"w": Tensor([1.0], requires_grad=True, dtype=np.float64)}
    optimizer_step(p, {"w": np.array([1.0])}, OptimizerState(), lr=0.1)
    assert_allclose(p["w"].data, [0.9], atol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor([2.0, -1.0], requires_grad=True, dtype=np.float64)}
    state = OptimizerState()
    for _ in range(3):
        optimizer_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert_array_equal(p["w"].data, [2.0, -1.0])
    assert state.step == 3


def test_adam_missing_gradient():
    params = init_params(model_preset("tiny"))
    with pytest.raises(GradientError):
        optimizer_step(params, collect_grads(params), OptimizerState(), lr=0.1)


def test_loss_values():
    target = np.zeros((2, 4, 3))
    pred = target.copy()
    assert weighted_pose_loss(Tensor(pred), target, [1.0] * 4).item() == 0.0
    pred[0, 2] = [3.0, 4.0, 0.0]
    # (1/N) * 5 for one sample, averaged over a batch of 2
    assert weighted_pose_loss(Tensor(pred), target, [1.0] * 4).item() == pytest.approx(5.0 / 4 / 2)
    assert weighted_pose_loss(Tensor(pred), target, [1.0, 1.0, 3.0, 1.0]).item() == pytest.approx(15.0 / 4 / 2)


def _identity_lift(inputs: np.ndarray) -> np.ndarray:
    return np.concatenate([inputs, np.zeros(inputs.shape[:-1] + (1,))], axis=-1)


def test_paired_flip_keeps_loss_of_equivariant_predictor(topo, rng):
    inputs = rng.uniform(-1, 1, size=(6, 17, 2))
    targets = rng.normal(0, 200, size=(6, 17, 3))
    weights = [1.0] * 17
    before = weighted_pose_loss(Tensor(_identity_lift(inputs), dtype=np.float64), targets, weights).item()
    flipped_in, flipped_out = augment_batch(inputs, targets, topo, rng, probability=1.0)
    assert_array_equal(flipped_out, flip_pose(targets, topo))
    after = weighted_pose_loss(Tensor(_identity_lift(flipped_in), dtype=np.float64), flipped_out, weights).item()
    assert after == pytest.approx(before, rel=1e-9)


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, seed=4)
    state = OptimizerState(step=7)
    state.m = {n: np.full(t.shape, 0.5, dtype=np.float32) for n, t in params.items()}
    state.v = {n: np.full(t.shape, 0.25, dtype=np.float32) for n, t in params.items()}
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(params, state, tiny_cfg, path)

    ckpt = load_checkpoint(path, expected_cfg=tiny_cfg)
    assert ckpt.model_cfg == tiny_cfg
    for name, t in params.items():
        assert_array_equal(ckpt.params[name].data, t.data)
    assert ckpt.opt_state.step == 7
    assert_array_equal(ckpt.opt_state.m["pos"], state.m["pos"])


def test_checkpoint_running_stats_stored_as_float32(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg)
    name = "layers.0.l2g_lcm.stack0.bn"
    stats = params.stats[name]
    stats.mean = np.full(stats.channels, 1.0 + 1e-12)
    stats.var = np.linspace(0.5, 2.0, stats.channels) / 3.0
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(params, None, tiny_cfg, path)
    loaded = load_checkpoint(path).params.stats[name]
    assert loaded.mean.dtype == np.float64
    assert_array_equal(loaded.mean, stats.mean.astype(np.float32))
    assert_array_equal(loaded.var, stats.var.astype(np.float32))


def test_checkpoint_truncated(tmp_path, tiny_cfg):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(tiny_cfg), None, tiny_cfg, str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated checkpoint"):
        load_checkpoint(str(path))


def _rewrite_header(path, edit):
    raw = path.read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 4
    (length,) = struct.unpack("<I", raw[len(CHECKPOINT_MAGIC):prefix])
    header = json.loads(raw[prefix:prefix + length])
    edit(header)
    encoded = json.dumps(header).encode("utf-8")
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(encoded)) + encoded + raw[prefix + length:])


def test_checkpoint_version_mismatch(tmp_path, tiny_cfg):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(tiny_cfg), None, tiny_cfg, str(path))
    _rewrite_header(path, lambda h: h.update(format_version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(path))


def test_checkpoint_edited_joint_count(tmp_path, tiny_cfg):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(tiny_cfg), None, tiny_cfg, str(path))
    _rewrite_header(path, lambda h: h["config"].update(joints=16))
    with pytest.raises(CheckpointError, match="config mismatch"):
        load_checkpoint(str(path))


def test_checkpoint_expected_config(tmp_path, tiny_cfg):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(init_params(tiny_cfg), None, tiny_cfg, path)
    with pytest.raises(CheckpointError, match="config mismatch"):
        load_checkpoint(path, expected_cfg=model_preset("tiny", layers=2))


@pytest.fixture
def small_set(topo):
    return synth_generate(topo, 24, seed=11)


def test_train_writes_log_and_checkpoint(tmp_path, tiny_cfg, topo, small_set):
    cfg = TrainConfig(epochs=2, batch_size=8, lr0=1e-3)
    report = train(DCGCT(tiny_cfg, topo), small_set, cfg, out_dir=str(tmp_path), quiet=True)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert set(record) == {"epoch", "lr", "train_loss", "val_mpjpe_mm", "wall_ms"}
    assert (tmp_path / "best.ckpt").exists()
    assert report.best_epoch in (0, 1)
    assert load_checkpoint(str(tmp_path / "best.ckpt"), expected_cfg=tiny_cfg).train_cfg == cfg


def test_training_is_deterministic(tiny_cfg, topo, small_set):
    cfg = TrainConfig(epochs=2, batch_size=8, lr0=1e-3, seed=5)
    first = train(DCGCT(tiny_cfg, topo, seed=5), small_set, cfg, quiet=True)
    second = train(DCGCT(tiny_cfg, topo, seed=5), small_set, cfg, quiet=True)
    assert first.epochs[-1]["val_mpjpe_mm"] == second.epochs[-1]["val_mpjpe_mm"]
    assert first.epochs[-1]["train_loss"] == second.epochs[-1]["train_loss"]


def test_same_seed_writes_identical_checkpoints(tmp_path, tiny_cfg, topo, small_set):
    cfg = TrainConfig(epochs=2, batch_size=8, lr0=1e-3, seed=5)
    for run in ("first", "second"):
        train(DCGCT(tiny_cfg, topo, seed=5), small_set, cfg, out_dir=str(tmp_path / run), quiet=True)
    first = (tmp_path / "first" / "best.ckpt").read_bytes()
    assert first == (tmp_path / "second" / "best.ckpt").read_bytes()


def _batch_threads():
    return [t for t in threading.enumerate() if t.name == BATCH_THREAD_NAME]


def test_aborted_training_joins_batch_workers(monkeypatch, tiny_cfg, topo, small_set):
    monkeypatch.setattr(train_module, "weighted_pose_loss", lambda pred, target, weights: T.mean(pred * np.nan))
    cfg = TrainConfig(epochs=1, batch_size=1, queue_size=1)
    for _ in range(3):
        with pytest.raises(NumericalError):
            train(DCGCT(tiny_cfg, topo), small_set, cfg, quiet=True)
    assert not _batch_threads()


@pytest.mark.parametrize("determinism", [True, False])
def test_closing_batches_early_joins_workers(monkeypatch, topo, small_set, determinism):
    monkeypatch.setenv("DCGCT_THREADS", "3")
    cfg = TrainConfig(batch_size=1, queue_size=1, determinism=determinism)
    batches = _epoch_batches(small_set, cfg, np.random.default_rng(0))
    next(batches)
    batches.close()
    assert not _batch_threads()


def test_determinism_mode_keeps_batch_order(monkeypatch, small_set):
    monkeypatch.setenv("DCGCT_THREADS", "3")
    cfg = TrainConfig(batch_size=5, seed=7)
    got = list(_epoch_batches(small_set, cfg, np.random.default_rng(7)))
    rng = np.random.default_rng(7)
    expected = [_prepare_batch(small_set, cfg, idx, rng) for idx in small_set.batches(5, rng)]
    assert len(got) == len(expected)
    for (inputs, targets), (want_in, want_out) in zip(got, expected):
        assert_array_equal(inputs, want_in)
        assert_array_equal(targets, want_out)


def test_unordered_batches_cover_every_sample(monkeypatch, small_set):
    monkeypatch.setenv("DCGCT_THREADS", "3")
    cfg = TrainConfig(batch_size=5, flip_augment=False, determinism=False)
    batches = list(_epoch_batches(small_set, cfg, np.random.default_rng(0)))
    assert sorted(len(inputs) for inputs, _ in batches) == [4, 5, 5, 5, 5]
    seen = np.concatenate([targets for _, targets in batches])
    assert sorted(t.tobytes() for t in seen) == sorted(t.tobytes() for t in small_set.targets())
    assert not _batch_threads()


def test_training_reduces_loss(tiny_cfg, topo, small_set):
    cfg = TrainConfig(epochs=6, batch_size=8, lr0=2e-3, per_epoch_decay=1.0, five_epoch_decay=1.0)
    report = train(DCGCT(tiny_cfg, topo), small_set, cfg, quiet=True)
    assert report.epochs[-1]["train_loss"] < report.epochs[0]["train_loss"]


def test_empty_dataset(tiny_cfg, topo, small_set):
    small_set.samples = []
    with pytest.raises(DatasetError):
        train(DCGCT(tiny_cfg, topo), small_set, TrainConfig(epochs=1), quiet=True)


def test_nan_loss_aborts(monkeypatch, tiny_cfg, topo, small_set):
    monkeypatch.setattr(train_module, "weighted_pose_loss", lambda pred, target, weights: T.mean(pred * np.nan))
    with pytest.raises(NumericalError, match="loss"):
        train(DCGCT(tiny_cfg, topo), small_set, TrainConfig(epochs=1, batch_size=8), quiet=True)


@pytest.mark.slow
def test_overfits_small_set(topo):
    cfg = model_preset("tiny", channels=64, c1=16, c2=48, heads=4)
    samples = synth_generate(topo, 64, seed=3)
    train_cfg = TrainConfig(epochs=200, batch_size=4, lr0=2e-3, per_epoch_decay=1.0, five_epoch_decay=1.0,
                            flip_augment=False, seed=1)
    report = train(DCGCT(cfg, topo, seed=1), samples, train_cfg, quiet=True)
    assert report.final_train_mpjpe_mm < 5.0
