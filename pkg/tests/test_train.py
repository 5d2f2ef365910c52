import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tknet import autodiff as ad
from tknet.autodiff import Parameters, Tensor
from tknet.data import Examples, Stats
from tknet.kernels import FeatureMap
from tknet.models import GruSpec, TemporalGRU, TimeConcatGRU
from tknet.spectral import GaussianSpectral
from tknet.train import (AdamState, NonFiniteLossError, TrainConfig, adam_step, evaluate,
                         first_non_finite, mae_loss, train_loop)


def test_zero_gradient_from_fresh_state_leaves_parameters():
    cfg = TrainConfig()
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), cfg)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_zero_gradient_decays_moments():
    cfg = TrainConfig()
    state = AdamState(3, {"w": np.array([0.4])}, {"w": np.array([0.09])})
    _, new = adam_step({"w": np.array([1.0])}, {"w": None}, state, cfg)
    assert new.m["w"][0] == pytest.approx(0.9 * 0.4) and new.v["w"][0] == pytest.approx(0.999 * 0.09)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]), st.floats(1e-4, 0.5))
def test_first_step_moves_by_learning_rate(mag, sign, lr):
    cfg = TrainConfig(lr=lr)
    new, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([sign * mag])}, AdamState(), cfg)
    # bias correction makes the first update exactly -lr * g / (|g| + eps)
    assert new["w"][0] == pytest.approx(-sign * lr * mag / (mag + cfg.eps), rel=1e-12)


def test_adam_minimizes_a_parabola():
    cfg = TrainConfig(lr=0.1)
    p, state = {"w": np.array([1.0])}, AdamState()
    for _ in range(50):
        p, state = adam_step(p, {"w": 2.0 * p["w"]}, state, cfg)
    assert abs(p["w"][0]) < 0.05


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"patience": 0}, {"batch_size": 0}, {"loss": "mse"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_mae_loss_value_and_gradient():
    pred = Tensor(np.array([1.0, 2.0, 4.0]), requires_grad=True)
    loss = mae_loss(pred, np.array([0.0, 3.0, 4.5]))
    assert loss.item() == pytest.approx((1.0 + 1.0 + 0.5) / 3)
    ad.backward(loss)
    np.testing.assert_allclose(pred.grad, [1 / 3, -1 / 3, -1 / 3])


# ---------------------------------------------------------------------------


def _toy(n=96, q=4, seed=0):
    rng = np.random.default_rng(seed)
    tau = np.sort(rng.uniform(0.1, 3.0, (n, q)), axis=1)[:, ::-1].copy()
    x = rng.standard_normal((n, q, 1))
    y = x[:, -1, 0] * np.cos(tau[:, -1]) + 0.1 * rng.standard_normal(n)
    return Examples(x, tau, y, np.zeros(n), True)


def _trnn(seed=0, m=2):
    params = Parameters()
    fm = FeatureMap(GaussianSpectral(4, params), m, 2, seed=seed + 1)
    return TemporalGRU(GruSpec(1, 3, (4, 1)), fm, params, seed=seed)


def test_joint_gradients_reach_network_and_spectral_parameters():
    model, data = _trnn(), _toy(16)
    loss = mae_loss(model.predict(data.x, data.t), data.y)
    ad.backward(loss)
    for name, p in model.params.items():
        assert p.grad is not None and np.any(p.grad != 0), name
    assert any(name.startswith("spectral/") for name, _ in model.params.items())


def test_training_is_deterministic(tmp_path):
    runs = []
    for k in range(2):
        model = _trnn()
        res = train_loop(model, _toy(), _toy(32, seed=1), TrainConfig(seed=4, max_epochs=4, batch_size=32),
                         history_path=tmp_path / f"h{k}.csv")
        runs.append((res.history, model.params.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])
    assert (tmp_path / "h0.csv").read_bytes() == (tmp_path / "h1.csv").read_bytes()


def test_early_stopping_and_best_checkpoint(tmp_path):
    model = TimeConcatGRU(GruSpec(1, 3, (3, 1)), Parameters(), seed=0)
    val = _toy(32, seed=1)
    cfg = TrainConfig(lr=0.05, seed=0, max_epochs=60, patience=3, batch_size=16)
    res = train_loop(model, _toy(), val, cfg, checkpoint_path=tmp_path / "ck.json", meta={"k": 1})
    epochs = [h[0] for h in res.history]
    vals = [h[2] for h in res.history]
    assert len(epochs) <= res.best_epoch + cfg.patience
    assert res.best_val == min(vals) == vals[res.best_epoch - 1]
    # the model holds the best parameters, matching the saved checkpoint
    pred = model.predict(val.x, val.t).value
    assert float(np.mean(np.abs(pred - val.y))) == pytest.approx(res.best_val, rel=1e-12)
    state, _, meta = ad.read_checkpoint(tmp_path / "ck.json")
    assert meta["epoch"] == res.best_epoch and meta["k"] == 1
    for k, v in state.items():
        np.testing.assert_array_equal(v, model.params[k].value)


def test_training_improves_on_a_learnable_signal():
    model = _trnn(m=4)
    train, val = _toy(192), _toy(64, seed=1)
    before = float(np.mean(np.abs(model.predict(val.x, val.t).value - val.y)))
    res = train_loop(model, train, val, TrainConfig(lr=0.01, max_epochs=30, batch_size=32))
    assert res.best_val < before


def test_nan_loss_names_the_first_non_finite_tensor():
    model = _trnn()
    model.params["gru/Wr"].value[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="gru/Wr"):
        train_loop(model, _toy(16), _toy(16), TrainConfig(max_epochs=1))


def test_first_non_finite_in_graph():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True, name="x")
    with np.errstate(invalid="ignore"):
        y = ad.log(x)
    assert "log" in first_non_finite(ad.sum_(y * 2.0))


def test_evaluate_reports_original_units():
    class Const:
        def predict(self, x, tau):
            return Tensor(np.zeros(len(x)))

    data = Examples(np.zeros((3, 1, 1)), np.zeros((3, 1)), np.array([1.0, -1.0, 2.0]), np.zeros(3), True)
    assert evaluate(Const(), data, Stats(10.0, 3.0)) == pytest.approx(3.0 * 4.0 / 3)
    assert evaluate(Const(), data) == pytest.approx(4.0 / 3)
    assert math.isfinite(evaluate(Const(), data))
