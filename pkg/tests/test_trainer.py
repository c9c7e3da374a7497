import math

import numpy as np
import pytest

from tokd import checkpoint as ckpt_io
from tokd.datapipe import GenConfig, generate_dataset
from tokd.errors import ArgumentError, NumericError
from tokd.model import ModelConfig
from tokd.trainer import (DESK_HPARAMS, PAPER_HPARAMS, OptimState, TrainHParams, TrainingDiverged, adamw_step,
                          ema_update, lr_at, sample_batch, train)

SMALL = ModelConfig(d_model=16, n_layers=1, n_heads=2, patch=8, image_size=(16, 16))


@pytest.fixture(scope="module")
def data():
    return generate_dataset(4, 0, GenConfig(size=16), synthetic_frac=0.5)


# ---------------------------------------------------------------- schedule

def test_lr_schedule_points():
    hp = PAPER_HPARAMS
    assert lr_at(0, hp) == 0.0
    assert lr_at(2500, hp) == 2e-4
    mid = (2500 + 100_000) // 2
    assert lr_at(mid, hp) == pytest.approx(1e-4, rel=1e-4)
    assert lr_at(100_000, hp) == 0.0
    with pytest.raises(ArgumentError):
        lr_at(100_001, hp)


def test_lr_continuous_piecewise_linear():
    hp = TrainHParams(lr_peak=1.0, warmup_steps=10, total_steps=30)
    vals = [lr_at(s, hp) for s in range(31)]
    assert max(vals) == vals[10] == 1.0
    diffs = np.diff(vals)
    np.testing.assert_allclose(diffs[:10], 0.1)
    np.testing.assert_allclose(diffs[10:], -0.05)


def test_recipe_presets():
    assert PAPER_HPARAMS.betas == (0.9, 0.95) and PAPER_HPARAMS.weight_decay == 0.05
    assert PAPER_HPARAMS.ema_decay == 0.99 and PAPER_HPARAMS.grad_clip is None
    assert (DESK_HPARAMS.total_steps, DESK_HPARAMS.batch_size, DESK_HPARAMS.warmup_steps) == (2000, 4, 100)


# ---------------------------------------------------------------- AdamW

def test_adam_first_step_hand_value():
    hp = TrainHParams(betas=(0.9, 0.95), weight_decay=0.0, eps=1e-8)
    params = {"w": np.array([0.0])}
    state = OptimState.create(params, hp)
    adamw_step(params, {"w": np.array([1.0])}, state, lr=0.1)
    assert params["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)


def test_zero_gradient_is_fixed_point():
    hp = TrainHParams(weight_decay=0.0)
    params = {"w": np.array([1.5, -2.0])}
    state = OptimState.create(params, hp)
    for _ in range(5):
        adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.5, -2.0])


def test_norm_params_skip_decay():
    hp = TrainHParams(weight_decay=0.05)
    params = {"blocks.0.ln.gain": np.ones(3), "blocks.0.ffn.w1": np.ones(3)}
    state = OptimState.create(params, hp)
    adamw_step(params, {k: np.zeros(3) for k in params}, state, lr=0.1)
    np.testing.assert_array_equal(params["blocks.0.ln.gain"], 1.0)
    np.testing.assert_allclose(params["blocks.0.ffn.w1"], 1.0 - 0.1 * 0.05)


def test_adam_matches_scalar_oracle():
    hp = TrainHParams(betas=(0.9, 0.95), weight_decay=0.0, eps=1e-8)
    rng = np.random.default_rng(0)
    grads = rng.normal(size=20)
    params = {"w": np.array([0.3])}
    state = OptimState.create(params, hp)
    theta, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        adamw_step(params, {"w": np.array([g])}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
        assert abs(params["w"][0] - theta) < 1e-12


def test_nonfinite_gradient_names_parameter():
    hp = TrainHParams()
    params = {"a": np.zeros(2), "bad": np.zeros(2)}
    state = OptimState.create(params, hp)
    with pytest.raises(NumericError, match="bad"):
        adamw_step(params, {"a": np.zeros(2), "bad": np.array([0.0, np.nan])}, state)


# ---------------------------------------------------------------- EMA

def test_ema_arithmetic():
    assert ema_update({"w": np.array([1.0])}, {"w": np.array([0.0])}, 0.99)["w"][0] == pytest.approx(0.99)
    np.testing.assert_array_equal(ema_update({"w": np.array([5.0])}, {"w": np.array([2.0])}, 0.0)["w"], [2.0])


def test_ema_geometric_decay():
    shadow = {"w": np.array([1.0])}
    target = {"w": np.array([0.25])}
    for n in range(1, 51):
        ema_update(shadow, target, 0.9)
        assert abs(shadow["w"][0] - 0.25) == pytest.approx(0.9 ** n * 0.75, rel=1e-9)


# ---------------------------------------------------------------- training loop

def test_batches_depend_only_on_seed_and_step(data):
    hp = TrainHParams(batch_size=3)
    a = sample_batch(data, SMALL, hp, 5, 17)
    b = sample_batch(data, SMALL, hp, 5, 17)
    c = sample_batch(data, SMALL, hp, 5, 18)
    assert a["src_images"].tobytes() == b["src_images"].tobytes()
    assert a["tgt_images"].tobytes() != c["tgt_images"].tobytes()


def test_training_bitwise_reproducible(data):
    hp = TrainHParams(total_steps=6, warmup_steps=2, batch_size=2, log_every=3)
    a = train(data, SMALL, hp, seed=1)
    b = train(data, SMALL, hp, seed=1)
    assert ckpt_io.to_bytes(a.checkpoint) == ckpt_io.to_bytes(b.checkpoint)
    assert [m["loss"] for m in a.metrics] == [m["loss"] for m in b.metrics]
    assert {"psnr_raw", "psnr_ema"} <= set(a.metrics[0])


def test_resume_matches_uninterrupted(tmp_path, data):
    hp = TrainHParams(total_steps=200, warmup_steps=20, batch_size=2, log_every=100)
    full = train(data, SMALL, hp, seed=3)
    first = train(data, SMALL, hp, seed=3, stop_at=100, checkpoint_path=tmp_path / "c.bin")
    assert first.checkpoint.step == 100
    resumed = train(data, SMALL, hp, seed=0, resume=ckpt_io.load(tmp_path / "c.bin"))
    assert resumed.metrics[-1]["step"] == 200
    assert resumed.metrics[-1]["loss"] == full.metrics[-1]["loss"]
    for k in full.checkpoint.params:
        assert full.checkpoint.params[k].tobytes() == resumed.checkpoint.params[k].tobytes()
        assert full.checkpoint.ema[k].tobytes() == resumed.checkpoint.ema[k].tobytes()


def test_metrics_csv(tmp_path, data):
    hp = TrainHParams(total_steps=4, warmup_steps=1, batch_size=1, log_every=2)
    train(data, SMALL, hp, seed=0, metrics_path=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,psnr_raw,psnr_ema"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["2", "4"]


def test_divergence_keeps_last_good(data, monkeypatch):
    import tokd.trainer as tr
    hp = TrainHParams(total_steps=10, warmup_steps=1, batch_size=1, log_every=0)
    real = tr.loss_and_grads
    calls = {"n": 0}

    def flaky(params, cfg, batch):
        calls["n"] += 1
        value, pred, grads = real(params, cfg, batch)
        return (float("nan") if calls["n"] == 6 else value), pred, grads
    monkeypatch.setattr(tr, "loss_and_grads", flaky)
    with pytest.raises(TrainingDiverged) as exc:
        train(data, SMALL, hp, seed=0)
    good = exc.value.last_good
    assert good.step == 0
    assert all(np.isfinite(v).all() for v in good.params.values())


def test_divergence_checkpoints_periodically(data, monkeypatch, tmp_path):
    import tokd.trainer as tr
    hp = TrainHParams(total_steps=10, warmup_steps=1, batch_size=1, log_every=0)
    real = tr.loss_and_grads
    calls = {"n": 0}

    def flaky(params, cfg, batch):
        calls["n"] += 1
        value, pred, grads = real(params, cfg, batch)
        return (float("inf") if calls["n"] == 6 else value), pred, grads
    monkeypatch.setattr(tr, "loss_and_grads", flaky)
    with pytest.raises(TrainingDiverged) as exc:
        train(data, SMALL, hp, seed=0, checkpoint_path=tmp_path / "c.bin", checkpoint_every=2)
    assert exc.value.last_good.step == 4
    assert ckpt_io.load(tmp_path / "c.bin").step == 4
