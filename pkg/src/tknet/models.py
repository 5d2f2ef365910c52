"""Base networks and their composition with a temporal random-feature map.

All dense layers use i.i.d. standard-normal weights with a ``1/sqrt(fan_in)``
forward scale, so the same network serves training and the infinite-width
checks in :mod:`tknet.theory`.

Sequence batches are dense arrays: ``x`` of shape ``(n, q, d)`` and timespans
``tau`` of shape ``(n, q)`` (time remaining until the prediction target).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .kernels import FeatureMap
from .spectral import add_rowwise

MULTIPLY = "multiply"
ADD = "add"

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "linear": lambda x: x}


def dense(x: Tensor, W: Tensor, b: Tensor | None, fan_in: int | None = None) -> Tensor:
    """``x W / sqrt(fan_in) + b`` on rows of ``x``."""
    fan_in = W.shape[0] if fan_in is None else fan_in
    out = (x @ W) * (1.0 / math.sqrt(max(fan_in, 1)))
    return out if b is None else add_rowwise(out, b)


def compose_hidden(f_h, phi, mode: str = MULTIPLY) -> Tensor:
    """Combine hidden rows with random-feature rows.

    multiply: ``vec(outer(f_h, phi))`` (width ``d_h * 2m``); add: ``f_h + phi``.
    Works on single vectors or on ``(n, .)`` batches.
    """
    f_h, phi = ad.as_tensor(f_h), ad.as_tensor(phi)
    if mode == MULTIPLY:
        o = ad.outer(f_h, phi)
        return o.reshape(f_h.shape[:-1] + (f_h.shape[-1] * phi.shape[-1],))
    if mode == ADD:
        if f_h.shape != phi.shape:
            raise ad.ShapeError("compose_hidden(add)", f_h.shape, phi.shape)
        return f_h + phi
    raise ValueError(f"unknown composition mode {mode!r}")


def composed_width(d_h: int, phi_dim: int, mode: str) -> int:
    if mode == MULTIPLY:
        return d_h * phi_dim
    if phi_dim != d_h:
        raise ValueError(f"add composition needs 2m == d_h, got 2m={phi_dim}, d_h={d_h}")
    return d_h


# ---------------------------------------------------------------------------
# feed-forward network


@dataclass
class FfnSpec:
    widths: Sequence[int]
    activation: str = "relu"
    scaled: bool = True

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"FFN widths must list >= 2 positive sizes, got {list(self.widths)}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class FFN:
    """``f^(h) = W^(h) sigma(f^(h-1)) / sqrt(d_{h-1}) + b^(h)``, with ``f^(0) = x`` (no activation on x).

    With ``compose_at = h`` the layer-``h`` output is replaced by its
    composition with ``phi`` before the next layer; the next layer's scale
    stays ``1/sqrt(d_h)`` because ``phi`` has unit norm.  ``h = L`` composes
    the output itself.
    """

    def __init__(self, spec: FfnSpec, params: Parameters, prefix: str = "ffn",
                 rng: np.random.Generator | None = None, compose_at: int | None = None,
                 phi_dim: int | None = None, mode: str = MULTIPLY):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.compose_at = compose_at
        self.mode = mode
        L = len(spec.widths) - 1
        if compose_at is not None and not 1 <= compose_at <= L:
            raise ValueError(f"compose_at must lie in [1, {L}]")
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.fan_in: list[int] = []
        for h in range(1, L + 1):
            d_prev, d_h = spec.widths[h - 1], spec.widths[h]
            rows = d_prev
            if compose_at is not None and h == compose_at + 1:
                rows = composed_width(d_prev, phi_dim, mode)
            self.weights.append(params.add(f"{prefix}/W{h}", rng.standard_normal((rows, d_h))))
            self.biases.append(params.add(f"{prefix}/b{h}", rng.standard_normal((1, d_h))))
            self.fan_in.append(d_prev if spec.scaled else 1)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def forward(self, x, phi: Tensor | None = None) -> tuple[list[Tensor], Tensor]:
        """Returns ``(hiddens, output)``; ``hiddens[h-1]`` is layer ``h`` (composed if ``h == compose_at``)."""
        act = _ACTIVATIONS[self.spec.activation]
        f = ad.as_tensor(x)
        if f.ndim == 1:
            f = f.reshape(1, f.shape[0])
        hiddens = []
        for h in range(1, self.depth + 1):
            inp = f if h == 1 else act(f)
            f = dense(inp, self.weights[h - 1], self.biases[h - 1], self.fan_in[h - 1])
            if self.compose_at == h:
                if phi is None:
                    raise ValueError("this FFN composes with phi; pass phi=")
                f = compose_hidden(f, phi, self.mode)
            hiddens.append(f)
        return hiddens, f


def ffn_forward(net: FFN, x, phi: Tensor | None = None):
    return net.forward(x, phi)


class Mlp:
    """Readout head: relu hidden layers then a linear output."""

    def __init__(self, widths: Sequence[int], params: Parameters, prefix: str,
                 rng: np.random.Generator, fan_in0: int | None = None):
        self.W, self.b, self.fan = [], [], []
        for i in range(1, len(widths)):
            self.W.append(params.add(f"{prefix}/W{i}", rng.standard_normal((widths[i - 1], widths[i]))))
            self.b.append(params.add(f"{prefix}/b{i}", np.zeros((1, widths[i]))))
            self.fan.append(widths[i - 1] if i > 1 or fan_in0 is None else fan_in0)

    def __call__(self, x: Tensor) -> Tensor:
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            if i > 0:
                x = ad.relu(x)
            x = dense(x, W, b, self.fan[i])
        return x


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruSpec:
    input_dim: int
    hidden_dim: int = 32
    head_widths: Sequence[int] = field(default_factory=lambda: (32, 1))


class GRU:
    """Single-layer GRU.

    r = sig(x Wr + s Ur + br);  z = sig(x Wz + s Uz + bz)
    n = tanh(x Wn + r * (s Un) + bn);  h' = (1 - z) * n + z * h

    ``s`` is the recurrent input, normally ``h`` itself; a temporal model may
    pass the composed state instead (``rec_dim`` wide), while the gated carry
    always uses the raw ``h``.
    """

    def __init__(self, input_dim: int, hidden_dim: int, params: Parameters, prefix: str = "gru",
                 rng: np.random.Generator | None = None, rec_dim: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        H = hidden_dim
        R = rec_dim or H
        self.Wx = {g: params.add(f"{prefix}/W{g}", rng.standard_normal((input_dim, H))) for g in "rzn"}
        self.Uh = {g: params.add(f"{prefix}/U{g}", rng.standard_normal((R, H))) for g in "rzn"}
        self.b = {g: params.add(f"{prefix}/b{g}", np.zeros((1, H))) for g in "rzn"}

    def step(self, x: Tensor, h: Tensor, s: Tensor | None = None) -> Tensor:
        s = h if s is None else s
        # composed states carry unit-norm time features, so the fan-in stays H
        fan = self.hidden_dim
        r = ad.sigmoid(dense(x, self.Wx["r"], self.b["r"]) + dense(s, self.Uh["r"], None, fan))
        z = ad.sigmoid(dense(x, self.Wx["z"], self.b["z"]) + dense(s, self.Uh["z"], None, fan))
        n = ad.tanh(dense(x, self.Wx["n"], self.b["n"]) + r * dense(s, self.Uh["n"], None, fan))
        return (1.0 - z) * n + z * h

    def run(self, xs: Tensor, h0: Tensor | None = None) -> list[Tensor]:
        """Hidden states for each step of ``xs`` with shape ``(n, q, d)``."""
        n, q, _ = xs.shape
        h = Tensor(np.zeros((n, self.hidden_dim))) if h0 is None else h0
        out = []
        for i in range(q):
            h = self.step(xs[:, i, :], h)
            out.append(h)
        return out


# ---------------------------------------------------------------------------
# sequence models


class SequenceModel:
    """Interface shared by the temporal and baseline sequence regressors."""

    params: Parameters
    kind: str

    def predict(self, x, tau) -> Tensor:  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, x, tau) -> Tensor:
        return self.predict(x, tau)


def _to_tensor3(x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    return Tensor(x)


class TemporalGRU(SequenceModel):
    """GRU whose per-step hidden output is composed with ``phi(x_i, tau_i)``.

    With ``feedback=True`` the composed output of step ``i`` is the recurrent
    input of step ``i + 1`` (in add mode it is also the carried state).
    ``readout="last"`` reads the final composed step; ``"pool"`` their mean.
    """

    kind = "t-rnn"

    def __init__(self, spec: GruSpec, fm: FeatureMap, params: Parameters, mode: str = MULTIPLY,
                 seed: int = 0, feedback: bool = True, readout: str = "last"):
        rng = np.random.default_rng(seed)
        self.params, self.spec, self.fm, self.mode = params, spec, fm, mode
        if readout not in ("last", "pool"):
            raise ValueError(f"unknown readout {readout!r}")
        self.readout = readout
        self.feedback = feedback
        self.width = composed_width(spec.hidden_dim, fm.out_dim, mode)
        self.gru = GRU(spec.input_dim, spec.hidden_dim, params, "gru", rng,
                       rec_dim=self.width if feedback else None)
        self.head = Mlp([self.width, *spec.head_widths], params, "head", rng, fan_in0=spec.hidden_dim)

    def _phi(self, x: np.ndarray, tau: np.ndarray, freqs: Tensor, i: int) -> Tensor:
        z = self.fm.inputs(x[:, i, :] if self.fm.input_dim > 1 else None, tau[:, i])
        return self.fm(z, freqs)

    def hidden_states(self, x, tau) -> tuple[list[Tensor], list[Tensor]]:
        """Raw GRU outputs per step and the composed outputs the model uses
        (every step with feedback or pooling, else only the last)."""
        xt = _to_tensor3(x)
        xv, tau = xt.value, np.asarray(tau, dtype=np.float64)
        freqs = self.fm.frequencies()
        n, q, _ = xt.shape
        h = Tensor(np.zeros((n, self.spec.hidden_dim)))
        s = Tensor(np.zeros((n, self.width))) if self.feedback else None
        every_step = self.feedback or self.readout == "pool"
        hs, cs = [], []
        for i in range(q):
            h = self.gru.step(xt[:, i, :], h, s)
            hs.append(h)
            if every_step or i == q - 1:
                cs.append(compose_hidden(h, self._phi(xv, tau, freqs, i), self.mode))
            if self.feedback:
                s = cs[-1]
                if self.mode == ADD:
                    h = s
        return hs, cs

    def pooled(self, cs: list[Tensor]) -> Tensor:
        if self.readout == "last":
            return cs[-1]
        total = cs[0]
        for c in cs[1:]:
            total = total + c
        return total * (1.0 / len(cs))

    def predict(self, x, tau) -> Tensor:
        _, cs = self.hidden_states(x, tau)
        r = self.pooled(cs)
        return self.head(r).reshape(r.shape[0])


class TimeConcatGRU(SequenceModel):
    """Baseline: timespan appended to each step's features."""

    kind = "rnn-time"

    def __init__(self, spec: GruSpec, params: Parameters, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params, self.spec = params, spec
        self.gru = GRU(spec.input_dim + 1, spec.hidden_dim, params, "gru", rng)
        self.head = Mlp([spec.hidden_dim, *spec.head_widths], params, "head", rng)

    def predict(self, x, tau) -> Tensor:
        xt = _to_tensor3(x)
        tau = np.asarray(tau, dtype=np.float64)
        inp = Tensor(baseline_time_concat(xt.value, tau))
        hs = self.gru.run(inp)
        return self.head(hs[-1]).reshape(xt.shape[0])


class TrigoGRU(SequenceModel):
    """Baseline: learnable ``[sin(pi_k tau), cos(pi_k tau)]`` appended to each step."""

    kind = "rnn-trigo"

    def __init__(self, spec: GruSpec, params: Parameters, k: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params, self.spec, self.k = params, spec, k
        self.freqs = params.add("trigo/pi", rng.standard_normal(k))
        self.gru = GRU(spec.input_dim + 2 * k, spec.hidden_dim, params, "gru", rng)
        self.head = Mlp([spec.hidden_dim, *spec.head_widths], params, "head", rng)

    def predict(self, x, tau) -> Tensor:
        xt = _to_tensor3(x)
        tau = np.asarray(tau, dtype=np.float64)
        n, q, _ = xt.shape
        h = Tensor(np.zeros((n, self.spec.hidden_dim)))
        for i in range(q):
            step_in = baseline_trigo(xt[:, i, :], tau[:, i], self.freqs)
            h = self.gru.step(step_in, h)
        return self.head(h).reshape(n)


class PlainGRU(SequenceModel):
    """No time information at all."""

    kind = "rnn"

    def __init__(self, spec: GruSpec, params: Parameters, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params, self.spec = params, spec
        self.gru = GRU(spec.input_dim, spec.hidden_dim, params, "gru", rng)
        self.head = Mlp([spec.hidden_dim, *spec.head_widths], params, "head", rng)

    def predict(self, x, tau) -> Tensor:
        xt = _to_tensor3(x)
        hs = self.gru.run(xt)
        return self.head(hs[-1]).reshape(xt.shape[0])


def gru_forward(model: SequenceModel, x, tau):
    """Hidden states (composed where applicable) and the prediction."""
    if isinstance(model, TemporalGRU):
        hs, cs = model.hidden_states(x, tau)
        r = model.pooled(cs)
        return cs, model.head(r).reshape(r.shape[0])
    xt = _to_tensor3(x)
    hs = model.gru.run(xt)
    return hs, model.head(hs[-1]).reshape(xt.shape[0])


def baseline_time_concat(x, t):
    """Append the scalar timespan to the features (last axis)."""
    if isinstance(x, Tensor):
        tt = ad.as_tensor(np.asarray(t, dtype=np.float64)).reshape(x.shape[:-1] + (1,))
        return ad.concat([x, tt], axis=-1)
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return np.concatenate([x, t.reshape(x.shape[:-1] + (1,))], axis=-1)


def baseline_trigo(x, t, freqs: Tensor) -> Tensor:
    """Append ``[sin(pi_1 t), cos(pi_1 t), ..., sin(pi_k t), cos(pi_k t)]`` with learnable ``pi``."""
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, x.shape[0])
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    k = freqs.shape[0]
    arg = Tensor(t) @ freqs.reshape(1, k)
    s, c = ad.sin(arg), ad.cos(arg)
    n = x.shape[0]
    feats = ad.concat([s.reshape(n, k, 1), c.reshape(n, k, 1)], axis=2).reshape(n, 2 * k)
    out = ad.concat([x, feats], axis=1)
    return out[0] if single else out


class TemporalFFN(SequenceModel):
    """FFN on the flattened history composed at layer ``compose_at`` with ``phi(z)``.

    The network sees the features only; time enters solely through the
    random features of ``z = [x_1..x_q, tau_1..tau_q]`` (so the feature map's
    input dimension is ``q * (d + 1)``).
    """

    kind = "t-ffn"

    def __init__(self, spec: FfnSpec, fm: FeatureMap, params: Parameters, compose_at: int = 1,
                 mode: str = MULTIPLY, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params, self.fm, self.mode = params, fm, mode
        self.net = FFN(spec, params, "ffn", rng, compose_at=compose_at, phi_dim=fm.out_dim, mode=mode)

    def predict(self, x, tau) -> Tensor:
        x = _flat_history(x)
        tau = np.asarray(tau, dtype=np.float64) * self.fm.time_scale
        phi = self.fm(np.concatenate([x, tau], axis=1))
        _, out = self.net.forward(Tensor(x), phi)
        return out.reshape(out.shape[0])


def _flat_history(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


class TimeFFN(SequenceModel):
    """Baseline FFN on flattened ``[x, timespans]``."""

    kind = "ffn-time"

    def __init__(self, spec: FfnSpec, params: Parameters, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = params
        self.net = FFN(spec, params, "ffn", rng)

    def predict(self, x, tau) -> Tensor:
        flat = np.concatenate([_flat_history(x), np.asarray(tau, dtype=np.float64)], axis=1)
        _, out = self.net.forward(Tensor(flat))
        return out.reshape(out.shape[0])


class TrigoFFN(SequenceModel):
    """Baseline FFN on flattened ``[x, sin/cos(pi_k tau)]`` with learnable ``pi``."""

    kind = "ffn-trigo"

    def __init__(self, spec: FfnSpec, params: Parameters, k: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params, self.k = params, k
        self.freqs = params.add("trigo/pi", rng.standard_normal(k))
        self.net = FFN(spec, params, "ffn", rng)

    def predict(self, x, tau) -> Tensor:
        tau = np.asarray(tau, dtype=np.float64)
        n, q = tau.shape
        flat_x = Tensor(_flat_history(x))
        feats = []
        for i in range(q):
            feats.append(baseline_trigo(Tensor(np.zeros((n, 0))), tau[:, i], self.freqs))
        inp = ad.concat([flat_x] + feats, axis=1)
        _, out = self.net.forward(inp)
        return out.reshape(n)
