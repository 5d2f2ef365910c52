"""Temporal kernels: random feature maps, kernel composition, analytic references.

Random features follow the usual layout ``[cos_1, sin_1, ..., cos_m, sin_m]``.
The stationary map is the special case ``omega_1 == omega_2`` of the
non-stationary one, and a feature-independent temporal kernel is simply an
input dimension of 1 (time only).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .autodiff import Tensor
from .spectral import FlowSpectral, GaussianSpectral
from .utils import write_csv

STATIONARY = "stationary"
NONSTATIONARY = "nonstationary"


# ---------------------------------------------------------------------------
# random feature maps


def _interleave(c: Tensor, s: Tensor) -> Tensor:
    n, m = c.shape
    both = ad.concat([c.reshape(n, m, 1), s.reshape(n, m, 1)], axis=2)
    return both.reshape(n, 2 * m)


def _as_rows(z) -> tuple[Tensor, bool]:
    z = ad.as_tensor(z)
    if z.ndim == 0:
        return z.reshape(1, 1), True
    if z.ndim == 1:
        return z.reshape(1, z.shape[0]), True
    return z, False


def _as_freqs(w, dim: int) -> Tensor:
    w = ad.as_tensor(w)
    if w.ndim == 1:
        # m scalar frequencies for a one-dimensional input
        if dim != 1:
            raise ad.ShapeError("random features", w.shape, (dim,))
        return w.reshape(w.shape[0], 1)
    if w.shape[1] != dim:
        raise ad.ShapeError("random features", w.shape, (dim,))
    return w


def _features(z, w1, w2=None) -> Tensor:
    zr, single = _as_rows(z)
    d = zr.shape[1]
    w1 = _as_freqs(w1, d)
    m = w1.shape[0]
    p1 = zr @ w1.T
    if w2 is None:
        out = _interleave(ad.cos(p1), ad.sin(p1)) * (1.0 / math.sqrt(m))
    else:
        w2 = _as_freqs(w2, d)
        if w2.shape != w1.shape:
            raise ad.ShapeError("phi_nonstationary", w1.shape, w2.shape)
        p2 = zr @ w2.T
        out = _interleave(ad.cos(p1) + ad.cos(p2), ad.sin(p1) + ad.sin(p2)) * (0.5 / math.sqrt(m))
    return out[0] if single else out


def phi_stationary(t, freqs) -> Tensor:
    """``(1/sqrt m) [cos(t w_1), sin(t w_1), ...]``.

    ``t`` may be a scalar, a vector of inputs ``z`` or an ``(n, dim)`` batch;
    ``freqs`` is ``(m,)`` for scalar time or ``(m, dim)``.
    """
    return _features(t, freqs)


def phi_nonstationary(z, pairs) -> Tensor:
    """``1/(2 sqrt m) [..., cos(z.w1_i) + cos(z.w2_i), sin(z.w1_i) + sin(z.w2_i), ...]``.

    ``pairs`` is ``(w1, w2)`` each ``(m, dim)``, or one ``(m, 2*dim)`` array
    holding ``[w1 | w2]`` side by side.
    """
    if isinstance(pairs, (tuple, list)):
        w1, w2 = pairs
    else:
        pairs = ad.as_tensor(pairs)
        half = pairs.shape[1] // 2
        w1, w2 = pairs[:, :half], pairs[:, half:]
    return _features(z, w1, w2)


class FeatureMap:
    """Frozen auxiliary draws plus a spectral sampler.

    ``input_dim`` is ``d + 1`` (features then time).  In non-stationary mode
    the sampler must have dimension ``2 * input_dim`` and each row of its
    output is read as ``[omega_1 | omega_2]``.
    """

    def __init__(self, sampler: GaussianSpectral | FlowSpectral, m: int, input_dim: int,
                 mode: str = NONSTATIONARY, seed: int = 0, eps: np.ndarray | None = None,
                 time_scale: float = 1.0):
        if mode not in (STATIONARY, NONSTATIONARY):
            raise ValueError(f"unknown feature-map mode {mode!r}")
        width = input_dim if mode == STATIONARY else 2 * input_dim
        if sampler.dim != width:
            raise ad.ShapeError("FeatureMap", (sampler.dim,), (width,))
        self.sampler = sampler
        self.m = m
        self.input_dim = input_dim
        self.mode = mode
        self.time_scale = float(time_scale)
        if eps is None:
            eps = np.random.default_rng(seed).standard_normal((m, width))
        eps = np.array(eps, dtype=np.float64)
        if eps.shape != (m, width):
            raise ad.ShapeError("FeatureMap eps", eps.shape, (m, width))
        eps.setflags(write=False)
        self._eps = eps

    @property
    def eps(self) -> np.ndarray:
        return self._eps

    @property
    def out_dim(self) -> int:
        return 2 * self.m

    def frequencies(self) -> Tensor:
        return self.sampler.sample(self._eps)

    def inputs(self, x, t) -> np.ndarray:
        """Stack features and (scaled) times into ``z = [x, t]`` rows."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * self.time_scale
        n = t.shape[0]
        if self.input_dim == 1:
            return t.reshape(n, 1)
        x = np.asarray(x, dtype=np.float64).reshape(n, -1)
        if x.shape[1] + 1 != self.input_dim:
            raise ad.ShapeError("FeatureMap inputs", x.shape, (n, self.input_dim - 1))
        return np.concatenate([x, t[:, None]], axis=1)

    def __call__(self, z, freqs: Tensor | None = None) -> Tensor:
        """Features of rows ``z`` (already stacked via :meth:`inputs`)."""
        w = self.frequencies() if freqs is None else freqs
        if self.mode == STATIONARY:
            return phi_stationary(z, w)
        return phi_nonstationary(z, w)

    def features(self, x, t, freqs: Tensor | None = None) -> Tensor:
        return self(self.inputs(x, t), freqs)


def kernel_gram(fm: FeatureMap, inputs) -> np.ndarray:
    """``G[i, j] = <phi(z_i), phi(z_j)>`` for rows ``z_i`` of ``inputs``.

    ``inputs`` is either an ``(n, input_dim)`` array of stacked ``[x, t]`` rows
    or a sequence of ``(x, t)`` pairs.
    """
    if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
        z = inputs
    else:
        xs = [np.atleast_1d(x) for x, _ in inputs]
        ts = [t for _, t in inputs]
        z = fm.inputs(np.array(xs) if fm.input_dim > 1 else None, ts)
    phi = fm(z).value
    g = phi @ phi.T
    return 0.5 * (g + g.T)


def compose_kernel(sigma, kt, tol: float = 1e-8) -> np.ndarray:
    """Schur product ``sigma * kt`` of two symmetric PSD Gram matrices."""
    sigma = np.asarray(sigma, dtype=np.float64)
    kt = np.asarray(kt, dtype=np.float64)
    if sigma.shape != kt.shape or sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ad.ShapeError("compose_kernel", sigma.shape, kt.shape)
    for name, mat in (("sigma", sigma), ("kt", kt)):
        if not np.allclose(mat, mat.T, atol=1e-10):
            raise ValueError(f"compose_kernel: {name} is not symmetric")
        if np.linalg.eigvalsh(mat).min() < -tol:
            raise ValueError(f"compose_kernel: {name} is not PSD")
    return sigma * kt


# ---------------------------------------------------------------------------
# analytic references


@dataclass(frozen=True)
class Ctar2Params:
    """Coefficients of ``f'' + a0 f' + a1 f = b0 eps`` and the noise level ``p0``.

    ``b0 = 0`` is accepted (noise-free system) but has an identically zero SDF.
    """

    a0: float
    a1: float
    b0: float = 1.0
    p0: float = 1.0

    def __post_init__(self):
        if not (self.a0 > 0 and self.a1 > 0):
            raise ValueError(f"unstable CTAR(2) parameters: a0={self.a0}, a1={self.a1} (both must be > 0)")
        if not self.p0 > 0:
            raise ValueError(f"noise level p0 must be > 0, got {self.p0}")

    @property
    def variance(self) -> float:
        return self.p0 * self.b0**2 / (2.0 * self.a0 * self.a1)


@dataclass(frozen=True)
class Matern32Params:
    amplitude: float = 1.0
    length_scale: float = 1.0
    nu: float = 1.5

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be > 0")
        if self.nu != 1.5:
            raise ValueError("only the nu = 3/2 member is implemented")

    def as_ctar2(self) -> Ctar2Params:
        """The second-order system whose stationary covariance is this kernel."""
        lam = math.sqrt(3.0) / self.length_scale
        a0, a1 = 2.0 * lam, lam * lam
        return Ctar2Params(a0=a0, a1=a1, b0=self.amplitude * math.sqrt(2.0 * a0 * a1), p0=1.0)


def ctar2_sdf(p: Ctar2Params, omega):
    """``p0 * b0^2 / ((a1 - w^2)^2 + a0^2 w^2)``."""
    w = np.asarray(omega, dtype=np.float64)
    return p.p0 * p.b0**2 / ((p.a1 - w * w) ** 2 + (p.a0 * w) ** 2)


def ctar2_autocov(p: Ctar2Params, lags) -> np.ndarray:
    """Covariance at ``lags`` by numerically inverting the SDF (Fourier quadrature)."""
    lags = np.atleast_1d(np.asarray(lags, dtype=np.float64))
    out = np.empty_like(lags)
    for i, tau in enumerate(np.abs(lags)):
        if tau == 0.0:
            val, _ = integrate.quad(lambda w: ctar2_sdf(p, w), 0.0, np.inf, epsabs=1e-13, epsrel=1e-12)
        else:
            val, _ = integrate.quad(lambda w: ctar2_sdf(p, w), 0.0, np.inf, weight="cos", wvar=tau)
        out[i] = val / math.pi
    return out


def matern32_kernel(p: Matern32Params, dt):
    r = math.sqrt(3.0) * np.abs(np.asarray(dt, dtype=np.float64)) / p.length_scale
    return p.amplitude**2 * (1.0 + r) * np.exp(-r)


def matern32_sdf(p: Matern32Params, omega):
    """Spectral density in the same convention as :func:`ctar2_sdf`."""
    return ctar2_sdf(p.as_ctar2(), omega)


def aliased_sdf(p: Ctar2Params, a: float, omega, K: int = 128):
    """SDF of the sampled sequence ``f(n a)``: ``(1/a) sum_{|k|<=K} s((w + 2 pi k) / a)``.

    The tail beyond ``K`` is ``O(K^-3)`` since ``s(w) = O(w^-4)``.
    """
    if a <= 0:
        raise ValueError("sampling interval must be > 0")
    if K < 0:
        raise ValueError("truncation K must be >= 0")
    w = np.asarray(omega, dtype=np.float64)
    k = np.arange(-K, K + 1, dtype=np.float64)
    shifted = (w[..., None] + 2.0 * math.pi * k) / a
    return ctar2_sdf(p, shifted).sum(-1) / a


def gaussian_rbf(dt, sigma: float = 1.0, mu: float = 0.0):
    """Kernel of an N(mu, sigma^2) spectral density: ``cos(mu dt) exp(-sigma^2 dt^2 / 2)``."""
    dt = np.asarray(dt, dtype=np.float64)
    return np.cos(mu * dt) * np.exp(-0.5 * (sigma * dt) ** 2)


# ---------------------------------------------------------------------------
# CSV export


def export_gram_csv(path, gram: np.ndarray) -> None:
    n = gram.shape[0]
    rows = ((i, j, gram[i, j]) for i in range(n) for j in range(n))
    write_csv(path, ["i", "j", "value"], rows)


def export_sdf_csv(path, omega: Sequence[float], columns: dict[str, Sequence[float]]) -> None:
    names = list(columns)
    rows = (tuple([w] + [columns[c][i] for c in names]) for i, w in enumerate(omega))
    write_csv(path, ["omega"] + names, rows)
