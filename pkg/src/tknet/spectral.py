"""Learnable spectral distributions sampled by reparameterization.

Two samplers map fixed auxiliary standard-normal noise ``eps`` to frequency
samples, differentiably in their parameters:

* :class:`GaussianSpectral` -- ``omega = exp(log_sigma) * eps + mu`` with a
  diagonal covariance.
* :class:`FlowSpectral` -- a stack of affine coupling layers with a half-swap
  between consecutive layers; starts as the identity map.

Both accept ``eps`` as an ``(m, dim)`` array (or a single ``(dim,)`` vector)
and return a :class:`~tknet.autodiff.Tensor` of the same shape.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor

SCALE_CLAMP = 5.0
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int, what: str):
        self.layer = layer
        super().__init__(f"coupling layer {layer}: non-finite {what}")


def _as_batch(eps) -> tuple[np.ndarray, bool]:
    arr = np.asarray(eps.value if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _rows(x: Tensor, single: bool) -> Tensor:
    return x[0] if single else x


def add_rowwise(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` (1, k) repeated over the rows of ``x`` (n, k)."""
    ones = Tensor(np.ones((x.shape[0], 1)))
    return x + ones @ b


class GaussianSpectral:
    """Diagonal Gaussian spectral density N(mu, diag(sigma^2))."""

    def __init__(self, dim: int, params: Parameters, prefix: str = "spectral/gauss",
                 mu=None, log_sigma=None):
        self.dim = dim
        self.prefix = prefix
        self.mu = params.add(f"{prefix}/mu", np.zeros(dim) if mu is None else mu)
        self.log_sigma = params.add(f"{prefix}/log_sigma", np.zeros(dim) if log_sigma is None else log_sigma)
        if self.mu.shape != (dim,) or self.log_sigma.shape != (dim,):
            raise ad.ShapeError("GaussianSpectral", self.mu.shape, self.log_sigma.shape)

    def sample(self, eps) -> Tensor:
        arr, single = _as_batch(eps)
        if arr.shape[1] != self.dim:
            raise ad.ShapeError("gaussian_sample", arr.shape, (self.dim,))
        n = arr.shape[0]
        ones = Tensor(np.ones((n, 1)))
        sigma = ad.exp(self.log_sigma).reshape(1, self.dim)
        mu = self.mu.reshape(1, self.dim)
        out = Tensor(arr) * (ones @ sigma) + ones @ mu
        return _rows(out, single)

    def log_density(self, x) -> np.ndarray:
        arr, single = _as_batch(x)
        mu, ls = self.mu.value, self.log_sigma.value
        z = (arr - mu) * np.exp(-ls)
        out = -0.5 * (z * z).sum(1) - ls.sum() - 0.5 * self.dim * LOG_2PI
        return out[0] if single else out


def gaussian_sample(g: GaussianSpectral, eps) -> Tensor:
    return g.sample(eps)


class _Mlp:
    """Two-layer perceptron ``W2 tanh(W1 u + b1) + b2`` acting on rows."""

    def __init__(self, params: Parameters, prefix: str, d_in: int, hidden: int, d_out: int,
                 rng: np.random.Generator, zero_output: bool = True):
        scale = 1.0 / math.sqrt(max(d_in, 1))
        self.W1 = params.add(f"{prefix}/W1", rng.standard_normal((d_in, hidden)) * scale)
        self.b1 = params.add(f"{prefix}/b1", np.zeros((1, hidden)))
        w2 = np.zeros((hidden, d_out)) if zero_output else rng.standard_normal((hidden, d_out)) / math.sqrt(hidden)
        self.W2 = params.add(f"{prefix}/W2", w2)
        self.b2 = params.add(f"{prefix}/b2", np.zeros((1, d_out)))

    def __call__(self, u: Tensor) -> Tensor:
        h = ad.tanh(add_rowwise(u @ self.W1, self.b1))
        return add_rowwise(h @ self.W2, self.b2)


def _clamp(s: Tensor) -> Tensor:
    # smooth clamp into (-5, 5); identity to first order near 0
    return SCALE_CLAMP * ad.tanh(s * (1.0 / SCALE_CLAMP))


class CouplingLayer:
    """Sequential affine coupling on a ``dim``-vector split at ``k``.

    forward:  v1 = z1 * exp(s1(z2)) + t1(z2);  v2 = z2 * exp(s2(v1)) + t2(v1)
    inverse:  z2 = (v2 - t2(v1)) * exp(-s2(v1)); z1 = (v1 - t1(z2)) * exp(-s1(z2))

    With ``dim == 1`` the second half is empty and ``s1, t1`` reduce to
    learnable constants.
    """

    def __init__(self, dim: int, params: Parameters, prefix: str, hidden: int = 32,
                 rng: np.random.Generator | None = None, zero_init: bool = True):
        if dim < 1:
            raise ValueError("coupling dimension must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.k = max(1, dim // 2)
        d1, d2 = self.k, dim - self.k
        self.s1 = _Mlp(params, f"{prefix}/s1", d2, hidden, d1, rng, zero_init)
        self.t1 = _Mlp(params, f"{prefix}/t1", d2, hidden, d1, rng, zero_init)
        self.s2 = _Mlp(params, f"{prefix}/s2", d1, hidden, d2, rng, zero_init)
        self.t2 = _Mlp(params, f"{prefix}/t2", d1, hidden, d2, rng, zero_init)

    def _split(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return z[:, : self.k], z[:, self.k:]

    def forward(self, z: Tensor, index: int = 0) -> tuple[Tensor, Tensor]:
        """Map rows of ``z`` (n, dim); returns ``(v, log_det)`` with log_det of shape (n,)."""
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ad.ShapeError("coupling_forward", z.shape, (self.dim,))
        z1, z2 = self._split(z)
        s1 = _clamp(self.s1(z2))
        v1 = z1 * ad.exp(s1) + self.t1(z2)
        _check_finite(v1, index, "v1")
        log_det = s1.sum(axis=1)
        if self.dim > self.k:
            s2 = _clamp(self.s2(v1))
            v2 = z2 * ad.exp(s2) + self.t2(v1)
            _check_finite(v2, index, "v2")
            log_det = log_det + s2.sum(axis=1)
            v = ad.concat([v1, v2], axis=1)
        else:
            v = v1
        return v, log_det

    def inverse(self, v: Tensor) -> Tensor:
        v = ad.as_tensor(v)
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise ad.ShapeError("coupling_inverse", v.shape, (self.dim,))
        v1, v2 = self._split(v)
        if self.dim > self.k:
            z2 = (v2 - self.t2(v1)) * ad.exp(-_clamp(self.s2(v1)))
        else:
            z2 = v2
        z1 = (v1 - self.t1(z2)) * ad.exp(-_clamp(self.s1(z2)))
        if self.dim > self.k:
            return ad.concat([z1, z2], axis=1)
        return z1


def _check_finite(x: Tensor, index: int, what: str) -> None:
    if not np.all(np.isfinite(x.value)):
        raise NonFiniteError(index, what)


def _batch_tensor(x) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return x.reshape(1, x.shape[0]), True
    return x, False


def coupling_forward(layer: CouplingLayer, z) -> tuple[Tensor, Tensor]:
    zb, single = _batch_tensor(z)
    v, ld = layer.forward(zb)
    return (v[0], ld[0]) if single else (v, ld)


def coupling_inverse(layer: CouplingLayer, v) -> Tensor:
    vb, single = _batch_tensor(v)
    z = layer.inverse(vb)
    return z[0] if single else z


class FlowSpectral:
    """Normalizing flow over frequencies: ``Q`` coupling layers, standard-normal base."""

    def __init__(self, dim: int, params: Parameters, n_layers: int = 4, hidden: int = 32,
                 prefix: str = "spectral/flow", seed: int = 0, zero_init: bool = True):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.prefix = prefix
        self.layers = [CouplingLayer(dim, params, f"{prefix}/{i}", hidden, rng, zero_init)
                       for i in range(n_layers)]
        self._k = max(1, dim // 2)

    def _swap(self, x: Tensor) -> Tensor:
        if self.dim == 1:
            return x
        return ad.concat([x[:, self._k:], x[:, : self._k]], axis=1)

    def _unswap(self, x: Tensor) -> Tensor:
        if self.dim == 1:
            return x
        cut = self.dim - self._k
        return ad.concat([x[:, cut:], x[:, :cut]], axis=1)

    def forward(self, z) -> tuple[Tensor, Tensor]:
        """Push base samples through every layer; returns ``(x, total log_det)``."""
        x = ad.as_tensor(z)
        total = None
        for i, layer in enumerate(self.layers):
            if i > 0:
                x = self._swap(x)
            x, ld = layer.forward(x, index=i)
            total = ld if total is None else total + ld
        if total is None:
            total = Tensor(np.zeros(x.shape[0]))
        return x, total

    def layer_log_dets(self, z) -> list[np.ndarray]:
        x = ad.as_tensor(z)
        out = []
        for i, layer in enumerate(self.layers):
            if i > 0:
                x = self._swap(x)
            x, ld = layer.forward(x, index=i)
            out.append(ld.value.copy())
        return out

    def inverse(self, x) -> Tensor:
        z = ad.as_tensor(x)
        for i in reversed(range(len(self.layers))):
            z = self.layers[i].inverse(z)
            if i > 0:
                z = self._unswap(z)
        return z

    def sample(self, eps) -> Tensor:
        arr, single = _as_batch(eps)
        if arr.shape[1] != self.dim:
            raise ad.ShapeError("flow_sample", arr.shape, (self.dim,))
        x, _ = self.forward(Tensor(arr))
        return _rows(x, single)

    def log_density(self, x) -> np.ndarray:
        """log q(f^-1(x)) - sum of forward log-dets evaluated along the inverse path."""
        arr, single = _as_batch(x)
        z = self.inverse(Tensor(arr))
        _, log_det = self.forward(z)
        zv = z.value
        out = -0.5 * (zv * zv).sum(1) - 0.5 * self.dim * LOG_2PI - log_det.value
        return out[0] if single else out


def flow_sample(f: FlowSpectral, eps) -> Tensor:
    return f.sample(eps)


def flow_log_density(f: FlowSpectral, x) -> np.ndarray:
    return f.log_density(x)


def chi2_divergence_gaussian(mu1, sigma1, mu0, sigma0) -> float:
    """chi^2(N(mu1, s1^2) || N(mu0, s0^2)) for diagonal Gaussians (product over dims).

    Infinite when ``2 s0^2 <= s1^2`` in any coordinate.
    """
    mu1, s1, mu0, s0 = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (mu1, sigma1, mu0, sigma0))
    denom = 2.0 * s0**2 - s1**2
    if np.any(denom <= 0):
        return math.inf
    per_dim = s0**2 / (s1 * np.sqrt(denom)) * np.exp((mu1 - mu0) ** 2 / denom)
    return float(np.prod(per_dim) - 1.0)
