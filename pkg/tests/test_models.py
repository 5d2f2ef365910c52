import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tknet import autodiff as ad
from tknet.autodiff import Parameters, Tensor
from tknet.kernels import FeatureMap
from tknet.models import (ADD, FFN, GRU, MULTIPLY, FfnSpec, GruSpec, TemporalFFN, TemporalGRU,
                          TimeConcatGRU, TimeFFN, TrigoFFN, TrigoGRU, baseline_time_concat,
                          baseline_trigo, compose_hidden, composed_width, ffn_forward, gru_forward)
from tknet.spectral import GaussianSpectral

def test_compose_multiply_example():
    out = compose_hidden(np.array([1.0, 2.0]), np.array([0.5, 0.5]), MULTIPLY)
    np.testing.assert_array_equal(out.value, [0.5, 0.5, 1.0, 1.0])


def test_compose_add_requires_matching_width():
    np.testing.assert_array_equal(compose_hidden(np.ones(2), np.array([1.0, 2.0]), ADD).value, [2.0, 3.0])
    with pytest.raises(ad.ShapeError):
        compose_hidden(np.ones(2), np.ones(4), ADD)
    with pytest.raises(ValueError):
        composed_width(3, 4, ADD)


def test_compose_with_unit_constant_feature_preserves_inner_products():
    m = 3
    phi = np.ones(2 * m) / math.sqrt(2 * m)
    u, v = np.array([0.3, -1.0, 2.0]), np.array([1.5, 0.2, -0.7])
    got = compose_hidden(u, phi).value @ compose_hidden(v, phi).value
    assert got == pytest.approx(u @ v, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_kernel_multiplication_identity(data):
    d = data.draw(st.integers(1, 5))
    k = data.draw(st.integers(1, 6))
    arr = lambda n: data.draw(arrays(np.float64, n, elements=st.floats(-5, 5)))
    u, v, p, q = arr(d), arr(d), arr(k), arr(k)
    lhs = compose_hidden(u, p).value @ compose_hidden(v, q).value
    assert lhs == pytest.approx((u @ v) * (p @ q), rel=1e-12, abs=1e-12)


def test_batched_composition_matches_rows():
    rng = np.random.default_rng(0)
    f, p = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    out = compose_hidden(f, p).value
    for i in range(4):
        np.testing.assert_array_equal(out[i], np.outer(f[i], p[i]).ravel())


# ---------------------------------------------------------------------------
# FFN


def test_ffn_zero_input_relu():
    params = Parameters()
    net = FFN(FfnSpec([3, 4, 2]), params)
    for b in net.biases:
        b.value = np.zeros_like(b.value)
    net.biases[-1].value = np.array([[0.5, -1.0]])
    hiddens, out = ffn_forward(net, np.zeros(3))
    np.testing.assert_array_equal(hiddens[0].value, np.zeros((1, 4)))
    np.testing.assert_array_equal(out.value, [[0.5, -1.0]])


def test_ffn_identity_linear_layer():
    net = FFN(FfnSpec([4, 4], activation="linear"), Parameters())
    net.weights[0].value = np.eye(4)
    net.biases[0].value = np.zeros((1, 4))
    x = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_allclose(net.forward(x)[1].value[0], x / 2.0, rtol=1e-15)


def _ffn_oracle(x, Ws, bs, compose_at=None, phi=None):
    f = x
    for h, (W, b) in enumerate(zip(Ws, bs), start=1):
        inp = f if h == 1 else np.maximum(f, 0.0)
        f = inp @ W / math.sqrt(W.shape[0] if h - 1 != compose_at else W.shape[0] // phi.shape[1]) + b
        if compose_at == h:
            f = np.einsum("ni,nj->nij", f, phi).reshape(f.shape[0], -1)
    return f


@pytest.mark.parametrize("compose_at", [None, 1, 2, 3])
def test_ffn_matches_straight_line_oracle(compose_at):
    rng = np.random.default_rng(3)
    m = 2
    net = FFN(FfnSpec([3, 5, 4, 2]), Parameters(), rng=rng, compose_at=compose_at, phi_dim=2 * m)
    x = rng.standard_normal((6, 3))
    phi = rng.standard_normal((6, 2 * m))
    out = net.forward(x, Tensor(phi))[1].value
    ref = _ffn_oracle(x, [w.value for w in net.weights], [b.value for b in net.biases], compose_at, phi)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_ffn_spec_validation():
    with pytest.raises(ValueError):
        FfnSpec([3])
    with pytest.raises(ValueError):
        FfnSpec([3, 2], activation="erf")
    with pytest.raises(ValueError):
        FFN(FfnSpec([3, 2]), Parameters(), compose_at=2, phi_dim=4)


# ---------------------------------------------------------------------------
# GRU


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _gru_oracle(xs, W, U, b, H):
    """Scalar-loop GRU with the 1/sqrt(fan-in) scaling of the dense layers."""
    d = len(xs[0])
    h = [0.0] * H
    for x in xs:
        pre = {}
        for g in "rzn":
            pre[g] = [sum(x[i] * W[g][i][j] for i in range(d)) / math.sqrt(d) + b[g][0][j] for j in range(H)]
        rec = {g: [sum(h[i] * U[g][i][j] for i in range(H)) / math.sqrt(H) for j in range(H)] for g in "rzn"}
        r = [_sig(pre["r"][j] + rec["r"][j]) for j in range(H)]
        z = [_sig(pre["z"][j] + rec["z"][j]) for j in range(H)]
        n = [math.tanh(pre["n"][j] + r[j] * rec["n"][j]) for j in range(H)]
        h = [(1 - z[j]) * n[j] + z[j] * h[j] for j in range(H)]
    return h


def test_gru_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    gru = GRU(2, 3, Parameters(), rng=rng)
    for g in "rzn":
        gru.b[g].value = rng.standard_normal((1, 3))
    xs = rng.standard_normal((1, 3, 2))
    h = gru.run(Tensor(xs))[-1].value[0]
    ref = _gru_oracle(xs[0].tolist(), {g: gru.Wx[g].value.tolist() for g in "rzn"},
                      {g: gru.Uh[g].value.tolist() for g in "rzn"},
                      {g: gru.b[g].value.tolist() for g in "rzn"}, 3)
    np.testing.assert_allclose(h, ref, rtol=1e-12, atol=1e-14)


def test_gru_zero_input_gives_zero_state():
    gru = GRU(2, 4, Parameters())
    np.testing.assert_array_equal(gru.run(Tensor(np.zeros((1, 1, 2))))[-1].value, np.zeros((1, 4)))


def test_gru_gate_degenerate_cases():
    rng = np.random.default_rng(1)
    gru = GRU(1, 2, Parameters(), rng=rng)
    h0 = Tensor(np.array([[0.4, -0.3]]))
    x = Tensor(np.array([[0.9]]))
    gru.b["z"].value = np.full((1, 2), 60.0)  # update gate saturated at 1: pure copy
    np.testing.assert_allclose(gru.step(x, h0).value, h0.value, atol=1e-20)
    gru.b["z"].value = np.full((1, 2), -60.0)  # update gate 0: state replaced by the candidate
    gru.b["r"].value = np.full((1, 2), -60.0)  # reset gate 0: candidate ignores the past
    expected = np.tanh(x.value @ gru.Wx["n"].value + gru.b["n"].value)
    np.testing.assert_allclose(gru.step(x, h0).value, expected, atol=1e-20)


# ---------------------------------------------------------------------------
# temporal models


def _tiny_fm(params, input_dim, m=2, seed=0, eps=None, mode="nonstationary"):
    dim = 2 * input_dim if mode == "nonstationary" else input_dim
    sampler = GaussianSpectral(dim, params, mu=0.1 * np.arange(dim), log_sigma=-0.2 * np.ones(dim))
    return FeatureMap(sampler, m, input_dim, mode=mode, seed=seed, eps=eps)


def _tiny_models(mode=MULTIPLY, feedback=True, readout="last"):
    params = Parameters()
    spec = GruSpec(1, 2, (3, 1))
    fm = _tiny_fm(params, 2, m=1 if mode == ADD else 2)
    return TemporalGRU(spec, fm, params, mode=mode, seed=0, feedback=feedback, readout=readout)


def _data(n=3, q=3, d=1, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, q, d)), np.sort(rng.uniform(0, 2, (n, q)), axis=1)[:, ::-1]


def _check_model_gradients(model, x, tau):
    params = model.params

    def loss():
        p = model.predict(x, tau)
        return ad.sum_(p * p)

    params.zero_grad()
    ad.backward(loss())
    leaves = list(params)
    fds = ad.grad_check_leaves(loss, leaves)
    for p, fd in zip(leaves, fds):
        g = np.zeros_like(fd) if p.grad is None else p.grad
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7, err_msg=p.name)


@pytest.mark.parametrize("mode,feedback,readout", [(MULTIPLY, True, "last"), (MULTIPLY, False, "last"),
                                                   (MULTIPLY, False, "pool"), (ADD, True, "last")])
def test_temporal_gru_gradients(mode, feedback, readout):
    x, tau = _data()
    _check_model_gradients(_tiny_models(mode, feedback, readout), x, tau)


def test_temporal_ffn_gradients():
    params = Parameters()
    x, tau = _data(q=2)
    fm = _tiny_fm(params, 2 * (1 + 1))
    model = TemporalFFN(FfnSpec([2, 3, 1]), fm, params, compose_at=1)
    _check_model_gradients(model, x, tau)


@pytest.mark.parametrize("cls", [TimeConcatGRU, TrigoGRU])
def test_baseline_gru_gradients(cls):
    params = Parameters()
    spec = GruSpec(1, 2, (2, 1))
    model = cls(spec, params, seed=1) if cls is TimeConcatGRU else cls(spec, params, k=2, seed=1)
    _check_model_gradients(model, *_data())


@pytest.mark.parametrize("cls,width", [(TimeFFN, 4), (TrigoFFN, 2 + 2 * 2 * 2)])
def test_baseline_ffn_gradients(cls, width):
    params = Parameters()
    spec = FfnSpec([width, 3, 1])
    model = cls(spec, params, seed=2) if cls is TimeFFN else cls(spec, params, k=2, seed=2)
    _check_model_gradients(model, *_data(q=2))


def test_plug_in_constant_features_make_time_inert():
    params = Parameters()
    spec = GruSpec(1, 3, (4, 1))
    fm = _tiny_fm(params, 2, m=3, eps=np.zeros((3, 4)))
    fm.sampler.mu.value = np.zeros(4)  # every frequency is exactly zero, so phi is constant
    model = TemporalGRU(spec, fm, params, seed=0)
    x, tau = _data(n=4, q=5)
    a = model.predict(x, tau).value
    b = model.predict(x, tau * 7.0 + 3.0).value
    np.testing.assert_array_equal(a, b)
    phi = fm.features(x[:, 0, :], tau[:, 0]).value
    np.testing.assert_allclose(np.linalg.norm(phi, axis=1), 1.0, rtol=1e-15)


def test_temporal_gru_depends_on_time():
    model = _tiny_models()
    x, tau = _data(n=4)
    assert not np.allclose(model.predict(x, tau).value, model.predict(x, tau + 1.0).value)


def test_gru_forward_returns_states_and_prediction():
    model = _tiny_models(feedback=False, readout="pool")
    x, tau = _data()
    states, pred = gru_forward(model, x, tau)
    assert len(states) == 3 and states[0].shape == (3, 2 * 4)
    np.testing.assert_allclose(pred.value, model.predict(x, tau).value, rtol=1e-15)


def test_baseline_feature_builders():
    out = baseline_time_concat(np.ones((2, 3, 1)), np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert out.shape == (2, 3, 2) and out[1, 2, 1] == 6.0
    freqs = Tensor(np.array([1.0, 2.0]))
    trig = baseline_trigo(np.array([7.0]), 0.5, freqs).value
    np.testing.assert_allclose(trig, [7.0, math.sin(0.5), math.cos(0.5), math.sin(1.0), math.cos(1.0)])
