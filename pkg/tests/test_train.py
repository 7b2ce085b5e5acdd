import math

import numpy as np
import pytest

import hvcnet.train as trainmod
from conftest import tiny_config
from hvcnet.autograd import Tensor
from hvcnet.data.augment import AugmentConfig
from hvcnet.data.idx import ImageSet
from hvcnet.errors import ConfigError, NumericError
from hvcnet.model import ModelConfig, build
from hvcnet.train import (
    ADAM_EPS,
    AdamState,
    TrainConfig,
    adam_step,
    ema_init,
    ema_update,
    epoch_batches,
    evaluate,
    lr_at,
    swapped_weights,
    train,
)


def _param(value, grad):
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    t.grad = np.array(grad, dtype=np.float64)
    return t


# -- Adam --------------------------------------------------------------------------------


def test_adam_first_step_identity():
    w = _param([0.0], [1.0])
    adam_step({"w": w}, AdamState(), 0.001)
    # bias-corrected moments are m_hat = 1, v_hat = 1
    assert w.data[0] == -0.001 / (1.0 + ADAM_EPS)
    assert w.data[0] == pytest.approx(-0.001, rel=1e-7)


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 1e4])
def test_adam_first_step_moves_by_lr_for_any_gradient_scale(g):
    w = _param([2.0], [g])
    adam_step({"w": w}, AdamState(), 0.01)
    assert w.data[0] == pytest.approx(2.0 - 0.01 * math.copysign(1.0, g), rel=1e-6)


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    w = _param([1.5, -2.0], [1.0, 2.0])
    state = AdamState()
    adam_step({"w": w}, state, 0.1)
    m, v = state.m["w"].copy(), state.v["w"].copy()
    before = w.data.copy()
    w.grad = np.zeros(2)
    adam_step({"w": w}, state, 0.1)
    np.testing.assert_array_equal(state.m["w"], 0.9 * m)
    np.testing.assert_array_equal(state.v["w"], 0.999 * v)
    # the update uses the decayed moments; it is zero only when they are
    w2 = _param([3.0], [0.0])
    adam_step({"w": w2}, AdamState(), 0.1)
    assert w2.data[0] == 3.0
    assert not np.array_equal(w.data, before)


def _scalar_adam(w, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_two_steps_on_quadratic_match_scalar_oracle():
    a = np.array([0.7, -1.3, 2.0])
    w0 = np.array([1.0, 0.5, -2.0])
    p = Tensor(w0.copy(), requires_grad=True)
    state = AdamState()
    for _ in range(2):
        p.grad = 2 * a * p.data  # d/dw sum(a w^2)
        adam_step({"p": p}, state, 0.05)
    for i in range(3):
        ref = _scalar_adam(w0[i], lambda w, i=i: 2 * a[i] * w, 0.05, 2)
        assert abs(p.data[i] - ref) <= 1e-12


def test_adam_missing_gradient_names_parameter():
    good = _param([1.0], [1.0])
    bad = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ValueError, match="conv3.kernel"):
        adam_step({"ok": good, "conv3.kernel": bad}, AdamState(), 0.1)
    assert good.data[0] == 1.0


# -- schedule -------------------------------------------------------------------------------


def test_lr_schedule_values():
    assert lr_at(0) == 0.001
    assert lr_at(1) == 0.00098
    assert lr_at(299) == pytest.approx(0.001 * 0.98**299, rel=1e-12)
    assert lr_at(299) == pytest.approx(2.38e-6, rel=1e-3)


def test_lr_ratio_exact_and_monotone():
    for e in range(300):
        assert lr_at(e + 1) == lr_at(e) * 0.98
        assert lr_at(e + 1) < lr_at(e)
    with pytest.raises(ValueError):
        lr_at(-1)


# -- EMA ------------------------------------------------------------------------------------


def test_ema_closed_form_after_1000_steps():
    p = {"w": Tensor(np.array([2.0, -1.0, 0.25]))}
    shadow0 = np.array([10.0, 3.0, -4.0])
    shadow = {"w": shadow0.copy()}
    for _ in range(1000):
        ema_update(shadow, p, 0.999)
    expected = p["w"].data + (shadow0 - p["w"].data) * 0.999**1000
    assert np.abs(shadow["w"] - expected).max() <= 1e-12


def test_ema_decay_zero_tracks_params_and_init_copies():
    p = {"w": Tensor(np.array([1.0, 2.0]))}
    shadow = ema_init(p)
    assert np.array_equal(shadow["w"], p["w"].data) and shadow["w"] is not p["w"].data
    p["w"].data = np.array([5.0, 6.0])
    ema_update(shadow, p, 0.0)
    assert np.array_equal(shadow["w"], [5.0, 6.0])


def test_swapped_weights_restores_originals():
    model, _ = build(tiny_config(), seed=0)
    original = {k: p.data for k, p in model.params.items()}
    shadow = {k: np.zeros_like(v) for k, v in original.items()}
    with swapped_weights(model, shadow):
        assert all(np.all(p.data == 0) for p in model.params.values())
    assert all(model.params[k].data is original[k] for k in original)


# -- training loop -----------------------------------------------------------------------


def _tiny_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = np.zeros((n, 28, 28), np.uint8)
    for i, y in enumerate(labels):
        images[i, 4 + 2 * y : 8 + 2 * y, 6:22] = 255  # class-dependent bar
        images[i] = np.clip(images[i] + rng.integers(0, 30, (28, 28)), 0, 255)
    return ImageSet(images, labels)


def _tiny_train_config(**kw):
    base = dict(epochs=2, batch_size=20, eval_batch_size=25, seed=3, model=tiny_config(), augment=AugmentConfig(strategy="none"))
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    for bad in (dict(base_lr=0.0), dict(lr_decay=1.5), dict(ema_decay=-0.1), dict(epochs=0), dict(batch_size=1), dict(dtype="float16")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_epoch_batches_shuffle_and_drop_singletons():
    batches = epoch_batches(41, 20, seed=0, epoch=0)
    assert [len(b) for b in batches] == [20, 20]
    assert len(np.unique(np.concatenate(batches))) == 40
    assert not np.array_equal(np.concatenate(batches), np.concatenate(epoch_batches(41, 20, seed=0, epoch=1)))
    assert all(np.array_equal(a, b) for a, b in zip(batches, epoch_batches(41, 20, seed=0, epoch=0)))


def test_training_is_deterministic_and_logs(tmp_path):
    data = _tiny_data()
    r1 = train(_tiny_train_config(), data, data, out_dir=tmp_path / "a")
    r2 = train(_tiny_train_config(), data, data, out_dir=tmp_path / "b")
    log1 = (tmp_path / "a" / "metrics.log").read_text()
    assert log1 == (tmp_path / "b" / "metrics.log").read_text()
    lines = log1.strip().splitlines()
    assert len(lines) == 2
    fields = lines[0].split(", ")
    assert len(fields) == 7 and fields[0] == "0" and float(fields[1]) == 0.001
    assert (tmp_path / "a" / "last.hvck").exists() and (tmp_path / "a" / "best.hvck").exists()
    for k in r1.model.params:
        assert r1.model.params[k].data.tobytes() == r2.model.params[k].data.tobytes()


def test_state_covers_exactly_trainable_parameters():
    data = _tiny_data()
    res = train(_tiny_train_config(epochs=1), data)
    trainable = set(res.model.trainable_parameters())
    assert set(res.state.adam.m) == set(res.state.adam.v) == set(res.state.ema) == trainable
    assert res.state.step == 3 and res.state.epoch == 1


def test_not_learnable_merge_stays_constant():
    data = _tiny_data()
    res = train(_tiny_train_config(model=tiny_config(merge="not-learnable")), data)
    assert "merge.weight" not in res.state.adam.m
    for rec in res.history:
        assert rec.branch_weights.tolist() == [1.0, 1.0, 1.0]


def test_ones_init_merge_starts_at_ones_and_learns():
    model, _ = build(ModelConfig(merge="ones-init"))
    assert model.merge_weights.tolist() == [1.0, 1.0, 1.0]
    data = _tiny_data()
    res = train(_tiny_train_config(model=tiny_config(merge="ones-init")), data)
    assert "merge.weight" in res.state.adam.m
    assert res.history[-1].branch_weights.tolist() != [1.0, 1.0, 1.0]


def test_ema_not_in_gradient_path():
    data = _tiny_data()
    res = train(_tiny_train_config(epochs=1), data)
    for name, p in res.model.trainable_parameters().items():
        assert res.state.ema[name] is not p.data
        assert not np.array_equal(res.state.ema[name], p.data)


def test_resume_matches_uninterrupted_run(tmp_path):
    data = _tiny_data()
    full = train(_tiny_train_config(epochs=2), data, data)
    train(_tiny_train_config(epochs=1), data, data, out_dir=tmp_path)
    resumed = train(_tiny_train_config(epochs=2), data, data, resume=tmp_path / "last.hvck")
    assert resumed.state.step == full.state.step
    for k, p in full.model.params.items():
        assert p.data.tobytes() == resumed.model.params[k].data.tobytes()
    for k, v in full.state.ema.items():
        assert v.tobytes() == resumed.state.ema[k].tobytes()
    assert resumed.history[0].test_acc_ema == full.history[1].test_acc_ema


def test_resume_with_other_model_config_rejected(tmp_path):
    data = _tiny_data()
    train(_tiny_train_config(epochs=1), data, out_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(_tiny_train_config(model=tiny_config(head="fc")), data, resume=tmp_path / "last.hvck")


def test_non_finite_loss_aborts_with_batch(monkeypatch):
    real_build = trainmod.build

    def poisoned(config, seed=0, dtype=np.float32):
        model, manifest = real_build(config, seed, dtype)
        model.params["conv1.bn.gamma"].data[:] = np.nan
        return model, manifest

    monkeypatch.setattr(trainmod, "build", poisoned)
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(_tiny_train_config(), _tiny_data())


def test_fp64_training_runs():
    res = train(_tiny_train_config(epochs=1, dtype="float64"), _tiny_data())
    assert all(p.data.dtype == np.float64 for p in res.model.params.values())


def test_tiny_model_learns_bars():
    data = _tiny_data(200)
    res = train(_tiny_train_config(epochs=6, batch_size=20, base_lr=0.01), data, data)
    assert res.history[-1].test_acc_ema > res.history[0].test_acc_ema
    assert res.history[-1].train_loss < res.history[0].train_loss


@pytest.mark.slow
def test_smoke_one_epoch_on_1000_images(proxy_data):
    train_set, _ = proxy_data
    res = train(TrainConfig(epochs=1, seed=0), train_set.subset(slice(0, 1000)))
    losses = res.history[0].batch_losses
    assert len(losses) == 9  # 8 full batches and one of 40
    assert all(math.isfinite(v) for v in losses)
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_untrained_model_is_at_chance(proxy_data):
    _, test = proxy_data
    model, _ = build(ModelConfig(), seed=0)
    acc, preds = evaluate(model, test)
    assert 0.05 <= acc <= 0.15
    acc2, preds2 = evaluate(model, test)
    assert acc == acc2 and np.array_equal(preds, preds2)
