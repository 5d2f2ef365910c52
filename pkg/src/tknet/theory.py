"""Infinite-width kernel recursions and the empirical checks built on them.

Conventions match :class:`tknet.models.FFN`: standard-normal weights and
biases with a ``1/sqrt(fan_in)`` forward scale, so

    Sigma^(1)(x, x') = x.x' / d0 + 1
    Sigma^(h+1)      = E[relu(u) relu(v)] + 1,   (u, v) ~ N(0, Sigma^(h))

and the NTK recursion ``Theta^(h+1) = Theta^(h) * Sigma_dot^(h+1) + Sigma^(h+1)``
with ``Sigma_dot^(h+1) = E[relu'(u) relu'(v)]``.  Composing layer ``k`` with a
random-feature map multiplies both ``Sigma^(k)`` and ``Theta^(k)`` entrywise by
the temporal Gram ``K_T``.

Every check returns a :class:`CheckReport` whose rows serialize to CSV.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .kernels import FeatureMap, GaussianSpectral, gaussian_rbf, phi_stationary
from .models import FFN, FfnSpec
from .spectral import FlowSpectral, chi2_divergence_gaussian, coupling_forward, coupling_inverse
from .utils import write_csv

# ---------------------------------------------------------------------------
# closed-form Gaussian expectations for relu


def _angle(kxx, kyy, kxy):
    norm = np.sqrt(kxx * kyy)
    cos = np.clip(kxy / np.where(norm > 0, norm, 1.0), -1.0, 1.0)
    return norm, np.arccos(cos)


def relu_expectations(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(E[relu(u) relu(v)], E[relu'(u) relu'(v)])`` for ``(u, v) ~ N(0, K[[i, j]])``.

    Arc-cosine kernels of order 1 and 0; ``relu'(0) = 0`` has measure zero here.
    """
    d = np.diag(K)
    norm, theta = _angle(d[:, None], d[None, :], K)
    k1 = norm / (2.0 * math.pi) * (np.sin(theta) + (math.pi - theta) * np.cos(theta))
    k0 = (math.pi - theta) / (2.0 * math.pi)
    return _sym(k1), _sym(k0)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def gaussian_expectation_mc(cov2: np.ndarray, fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                            n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo ``E[fn(u, v)]`` for ``(u, v) ~ N(0, cov2)``; returns ``(mean, standard error)``.

    The fallback oracle for activations without closed forms.
    """
    L = np.linalg.cholesky(np.asarray(cov2, dtype=np.float64) + 1e-300 * np.eye(2))
    z = rng.standard_normal((n, 2)) @ L.T
    vals = fn(z[:, 0], z[:, 1])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# analytic recursions


@dataclass
class KernelRecursion:
    """Per-layer kernels over one input set (index 0 is layer 1)."""

    sigma: list[np.ndarray]
    sigma_dot: list[np.ndarray | None]
    theta: list[np.ndarray]
    compose_at: int | None = None
    kt: np.ndarray | None = None

    @property
    def ntk(self) -> np.ndarray:
        return self.theta[-1]


def nn_kernel_analytic(inputs, depth: int, activation: str = "relu") -> list[np.ndarray]:
    """``Sigma^(1..depth)`` for inputs ``(n, d0)``."""
    if activation != "relu":
        raise ValueError("closed forms exist for relu only; use gaussian_expectation_mc for others")
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    sig = [_sym(X @ X.T / X.shape[1] + 1.0)]
    for _ in range(1, depth):
        k1, _ = relu_expectations(sig[-1])
        sig.append(k1 + 1.0)
    return sig


def neural_temporal_kernel(sigma_k: np.ndarray, kt: np.ndarray, extra_layers: int) -> list[np.ndarray]:
    """``Sigma_T^(k) = Sigma^(k) * K_T`` followed by ``extra_layers`` relu layers."""
    out = [_sym(np.asarray(sigma_k) * np.asarray(kt))]
    for _ in range(extra_layers):
        k1, _ = relu_expectations(out[-1])
        out.append(k1 + 1.0)
    return out


def ntk_temporal_analytic(inputs, depth: int, kt: np.ndarray | None = None,
                          compose_at: int | None = None) -> KernelRecursion:
    """Temporal NTK of a ``depth``-layer relu FFN composed at layer ``compose_at``.

    ``kt=None`` (or all ones) gives the plain NTK.  ``compose_at == depth`` is
    allowed: the output itself is composed and ``Theta_T = Sigma_T^(depth)``.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    n = X.shape[0]
    if kt is None:
        kt, compose_at = np.ones((n, n)), compose_at or 1
    kt = np.asarray(kt, dtype=np.float64)
    k = compose_at or 1
    if not 1 <= k <= depth:
        raise ValueError(f"compose_at must lie in [1, {depth}]")
    sigma = nn_kernel_analytic(X, 1)
    theta = [sigma[0].copy()]
    dots: list[np.ndarray | None] = [None]
    if k == 1:
        sigma[0] = _sym(sigma[0] * kt)
        theta[0] = _sym(theta[0] * kt)
    for h in range(2, depth + 1):
        k1, k0 = relu_expectations(sigma[-1])
        s, th = k1 + 1.0, theta[-1] * k0 + k1 + 1.0
        if h == k:
            s, th = s * kt, th * kt
        sigma.append(_sym(s))
        dots.append(k0)
        theta.append(_sym(th))
    return KernelRecursion(sigma, dots, theta, k, kt)


def normalize_diag(K: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(K))
    return K / np.outer(d, d)


def max_rel_error(emp: np.ndarray, ref: np.ndarray) -> float:
    return float(np.max(np.abs(emp - ref) / np.abs(ref)))


# ---------------------------------------------------------------------------
# empirical kernels


def empirical_gp_kernel(make_net: Callable[[int], tuple[FFN, Parameters]], X: np.ndarray,
                        phi: np.ndarray, n_draws: int, seed: int = 0, layer: int = 1) -> np.ndarray:
    """Mean over fresh initializations of ``<c(z_i), c(z_j)> / d_layer`` where ``c`` is the composed hidden.

    ``make_net(draw_seed)`` returns a network composed at ``layer``.
    """
    acc = np.zeros((X.shape[0], X.shape[0]))
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(n_draws):
        net, _ = make_net(int(child.generate_state(1)[0]))
        hiddens, _ = net.forward(Tensor(X), Tensor(phi))
        c = hiddens[layer - 1].value
        acc += c @ c.T / net.spec.widths[layer]
    return _sym(acc / n_draws)


def empirical_ntk(forward: Callable[[int], Tensor], params: Parameters, n_inputs: int) -> np.ndarray:
    """``Theta[i, j] = <df(z_i)/dtheta, df(z_j)/dtheta>`` over all registered parameters.

    ``forward(i)`` must build a fresh graph for input ``i`` and return a scalar.
    """
    rows = []
    for i in range(n_inputs):
        params.zero_grad()
        ad.backward(forward(i))
        rows.append(np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.value)).ravel()
                                    for p in params]))
    J = np.stack(rows)
    return _sym(J @ J.T)


# ---------------------------------------------------------------------------
# reports


@dataclass
class CheckReport:
    name: str
    columns: Sequence[str]
    rows: list[tuple] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def fail(self, msg: str) -> None:
        self.failures.append(msg)

    def write_csv(self, path) -> None:
        write_csv(path, ["check", *self.columns], [(self.name, *r) for r in self.rows])


def _feature_setup(seed: int, n: int, d0: int, m: int, t_max: float, x_scale: float):
    """Inputs plus a stationary time-only feature map with N(0, 1) frequencies."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d0)) * x_scale
    t = np.sort(rng.uniform(0.0, t_max, n))
    fm = FeatureMap(GaussianSpectral(1, Parameters(), prefix="spectral/time"), m, 1,
                    mode="stationary", seed=seed + 1)
    phi = fm.features(None, t).value
    return X, t, fm, phi


# ---------------------------------------------------------------------------
# GP limit of a composed one-hidden-layer network


def gp_limit_check(widths: Sequence[int] = (256, 1024, 4096), n_draws: int = 200, seeds: int = 10,
                   n_inputs: int = 6, d0: int = 3, m: int = 16, tol: float = 0.05,
                   base_seed: int = 0, jobs: int = 1) -> CheckReport:
    """Composed-hidden covariance against ``Sigma^(1) * K_T`` (realized feature Gram)."""
    rep = CheckReport("gp", ["width", "seed", "max_rel_error"])
    errs = {w: [] for w in widths}
    tasks = [(w, s) for w in widths for s in range(seeds)]
    for (w, s), e in zip(tasks, _map(_gp_one, [(w, base_seed + s, n_draws, n_inputs, d0, m) for w, s in tasks], jobs)):
        errs[w].append(e)
        rep.rows.append((w, base_seed + s, e))
    med = [float(np.median(errs[w])) for w in widths]
    for w, mval in zip(widths, med):
        rep.rows.append((w, "median", mval))
    if any(b >= a for a, b in zip(med, med[1:])):
        rep.fail(f"median error not decreasing in width: {dict(zip(widths, med))}")
    if med[-1] > tol:
        rep.fail(f"median error {med[-1]:.4f} at width {widths[-1]} exceeds {tol}")
    return rep


def _gp_one(args) -> float:
    width, seed, n_draws, n_inputs, d0, m = args
    X, t, fm, phi = _feature_setup(seed, n_inputs, d0, m, t_max=1.0, x_scale=0.5)
    spec = FfnSpec([d0, width])

    def make_net(s):
        params = Parameters()
        return FFN(spec, params, rng=np.random.default_rng(s), compose_at=1, phi_dim=phi.shape[1]), params

    emp = empirical_gp_kernel(make_net, X, phi, n_draws, seed=seed)
    ref = nn_kernel_analytic(X, 1)[0] * (phi @ phi.T)
    return max_rel_error(emp, ref)


# ---------------------------------------------------------------------------
# temporal NTK


def ntk_check(width: int = 1024, seeds: int = 10, n_inputs: int = 4, d0: int = 3, m: int = 16,
              tol: float = 0.10, base_seed: int = 0, jobs: int = 1) -> CheckReport:
    rep = CheckReport("ntk", ["width", "seed", "max_rel_error"])
    errs = _map(_ntk_one, [(width, base_seed + s, n_inputs, d0, m) for s in range(seeds)], jobs)
    for s, e in enumerate(errs):
        rep.rows.append((width, base_seed + s, e))
    med = float(np.median(errs))
    rep.rows.append((width, "median", med))
    if med > tol:
        rep.fail(f"median normalized NTK error {med:.4f} exceeds {tol}")
    # composition with an all-ones temporal Gram must reproduce the plain NTK exactly
    X = np.random.default_rng(base_seed).standard_normal((n_inputs, d0))
    plain = ntk_temporal_analytic(X, 2).ntk
    ones = ntk_temporal_analytic(X, 2, np.ones((n_inputs, n_inputs)), compose_at=1).ntk
    gap = float(np.max(np.abs(plain - ones)))
    rep.rows.append(("kt=1", "-", gap))
    if gap > 1e-12:
        rep.fail(f"K_T = 1 recursion differs from the plain NTK by {gap:.3e}")
    return rep


def _ntk_one(args) -> float:
    width, seed, n_inputs, d0, m = args
    X, t, fm, phi = _feature_setup(seed, n_inputs, d0, m, t_max=2.0, x_scale=1.0)
    params = Parameters()
    net = FFN(FfnSpec([d0, width, 1]), params, rng=np.random.default_rng(seed + 7),
              compose_at=1, phi_dim=phi.shape[1])

    def forward(i):
        _, out = net.forward(Tensor(X[i:i + 1]), Tensor(phi[i:i + 1]))
        return out.sum()

    emp = empirical_ntk(forward, params, n_inputs)
    ref = ntk_temporal_analytic(X, 2, phi @ phi.T, compose_at=1).ntk
    return max_rel_error(normalize_diag(emp), normalize_diag(ref))


# ---------------------------------------------------------------------------
# random-feature convergence


def rff_check(ms: Sequence[int] = (256, 1024, 4096), seeds: int = 20, grid: int = 50,
              dt_max: float = 4.0, ratio: float = 0.6, abs_tol: float = 0.03,
              base_seed: int = 0) -> CheckReport:
    """Sup error of ``<phi(0), phi(dt)>`` against ``exp(-dt^2 / 2)`` for N(0, 1) frequencies."""
    rep = CheckReport("rff", ["m", "seed", "sup_error"])
    dts = np.linspace(0.0, dt_max, grid)
    target = gaussian_rbf(dts)
    med = []
    for m in ms:
        errs = []
        for s in range(seeds):
            params = Parameters()
            g = GaussianSpectral(1, params, prefix="spectral/rff")
            eps = np.random.default_rng(base_seed + s).standard_normal((m, 1))
            freqs = g.sample(eps).value[:, 0]
            phi = phi_stationary(dts[:, None], freqs).value
            err = float(np.max(np.abs(phi @ phi[0] - target)))
            errs.append(err)
            rep.rows.append((m, base_seed + s, err))
        med.append(float(np.median(errs)))
        rep.rows.append((m, "median", med[-1]))
    for (m1, e1), (m2, e2) in zip(zip(ms, med), zip(ms[1:], med[1:])):
        if m2 == 4 * m1 and e2 > ratio * e1:
            rep.fail(f"err({m2}) = {e2:.4f} > {ratio} * err({m1}) = {ratio * e1:.4f}")
    if med[-1] > abs_tol:
        rep.fail(f"median sup error {med[-1]:.4f} at m={ms[-1]} exceeds {abs_tol}")
    return rep


# ---------------------------------------------------------------------------
# flow checks


def flow_check(dims: Sequence[int] = (1, 2, 3, 4), n_samples: int = 1000, n_layers: int = 4,
               zero_init: bool = False, seed: int = 0, round_trip_tol: float = 1e-9,
               logdet_tol: float = 1e-5, mass_tol: float = 1e-3) -> CheckReport:
    """Round trip, log-det vs. numeric Jacobian and 1-d normalization of coupling flows."""
    rep = CheckReport("flow", ["dim", "quantity", "value"])
    rng = np.random.default_rng(seed)
    for dim in dims:
        flow = FlowSpectral(dim, Parameters(), n_layers=n_layers, seed=seed + dim, zero_init=zero_init)
        z = rng.standard_normal((n_samples, dim)) * 2.0
        x, _ = flow.forward(Tensor(z))
        rt = float(np.max(np.abs(flow.inverse(x).value - z)))
        rep.rows.append((dim, "round_trip", rt))
        if rt > round_trip_tol:
            rep.fail(f"dim {dim}: round trip error {rt:.3e}")
        layer = flow.layers[0]
        zi = rng.standard_normal(dim)
        v, ld = coupling_forward(layer, zi)
        back = float(np.max(np.abs(coupling_inverse(layer, v).value - zi)))
        J = numeric_jacobian(lambda u: coupling_forward(layer, u)[0].value, zi)
        gap = abs(float(np.linalg.slogdet(J)[1]) - ld.item())
        rep.rows.append((dim, "layer_round_trip", back))
        rep.rows.append((dim, "logdet_gap", gap))
        if back > round_trip_tol:
            rep.fail(f"dim {dim}: coupling round trip error {back:.3e}")
        if gap > logdet_tol:
            rep.fail(f"dim {dim}: log-det differs from numeric Jacobian by {gap:.3e}")
        zf = rng.standard_normal(dim)
        _, total = flow.forward(Tensor(zf[None, :]))
        Jf = numeric_jacobian(lambda u: flow.forward(Tensor(u[None, :]))[0].value[0], zf)
        gapf = abs(float(np.linalg.slogdet(Jf)[1]) - total.value[0])
        rep.rows.append((dim, "flow_logdet_gap", gapf))
        if gapf > logdet_tol:
            rep.fail(f"dim {dim}: flow log-det differs from numeric Jacobian by {gapf:.3e}")
    flow1 = FlowSpectral(1, Parameters(), n_layers=n_layers, seed=seed, zero_init=zero_init)
    grid = np.linspace(-10.0, 10.0, 4001)
    mass = float(integrate.trapezoid(np.exp(flow1.log_density(grid[:, None])), grid))
    rep.rows.append((1, "density_mass", mass))
    if abs(mass - 1.0) > mass_tol:
        rep.fail(f"1-d density integrates to {mass:.6f}")
    return rep


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray, step: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        cols.append((fn(z + e) - fn(z - e)) / (2 * step))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# misspecified spectral densities


def shift_for_chi2(delta: float, sigma: float = 1.0) -> float:
    """Mean shift of N(0, s^2) whose chi^2 divergence from the reference equals ``delta``."""
    return sigma * math.sqrt(math.log1p(delta))


def _time_feature_mean(freqs: np.ndarray, t_max: float) -> np.ndarray:
    """``E phi(t)`` for ``t ~ U[0, t_max]`` in the interleaved cos/sin layout."""
    wt = freqs * t_max
    small = np.abs(wt) < 1e-8
    safe = np.where(small, 1.0, wt)
    c = np.where(small, 1.0, np.sin(wt) / safe)
    s = np.where(small, 0.0, (1.0 - np.cos(wt)) / safe)
    out = np.empty(2 * freqs.size)
    out[0::2], out[1::2] = c, s
    return out / math.sqrt(freqs.size)


def composed_u_statistic(x: np.ndarray, phi: np.ndarray) -> float:
    """``1/(n(n-1)) sum_{i != j} Sigma^(1)(x_i, x_j) <phi_i, phi_j>`` in O(n d m)."""
    n, d0 = x.shape
    base = np.hstack([x / math.sqrt(d0), np.ones((n, 1))])
    psi = (base[:, :, None] * phi[:, None, :]).reshape(n, -1)
    tot = psi.sum(0)
    return float((tot @ tot - np.einsum("ij,ij->", psi, psi)) / (n * (n - 1)))


def misspecification_check(deltas: Sequence[float] = (0.1, 1.0, 4.0), ns: Sequence[int] = (64, 256, 1024),
                           seeds: int = 20, m: int = 64, d0: int = 3, t_max: float = 2.0,
                           base_seed: int = 0) -> CheckReport:
    """Deviation of the composed-kernel U-statistic under chi^2-perturbed spectral densities.

    The reference spectral density is N(0, 1); each perturbation shifts its
    mean so that chi^2 equals ``delta`` exactly.  Frequencies, inputs and
    times share their random draws across ``delta`` (reparameterization), and
    the large-n expectation is exact given the frequencies.
    """
    rep = CheckReport("misspec", ["delta", "chi2", "n", "seed", "deviation"])
    med = np.zeros((len(deltas), len(ns)))
    for a, delta in enumerate(deltas):
        mu = shift_for_chi2(delta)
        chi2 = chi2_divergence_gaussian(mu, 1.0, 0.0, 1.0)
        for b, n in enumerate(ns):
            devs = []
            for s in range(seeds):
                rng = np.random.default_rng([base_seed + s, n])
                eps = rng.standard_normal(m)
                x = rng.standard_normal((n, d0))
                t = rng.uniform(0.0, t_max, n)
                freqs = eps + mu
                phi = phi_stationary(t[:, None], freqs).value
                est = composed_u_statistic(x, phi)
                mean_phi = _time_feature_mean(freqs, t_max)
                dev = abs(est - float(mean_phi @ mean_phi))
                devs.append(dev)
                rep.rows.append((delta, chi2, n, base_seed + s, dev))
            med[a, b] = np.median(devs)
            rep.rows.append((delta, chi2, n, "median", med[a, b]))
    for a, delta in enumerate(deltas):
        if np.any(np.diff(med[a]) >= 0):
            rep.fail(f"delta={delta}: deviation not decreasing in n: {med[a].tolist()}")
    growth = np.sqrt(np.asarray(deltas) + 1.0)
    for b, n in enumerate(ns):
        scaled = med[:, b] / growth
        if np.any(scaled[1:] > scaled[0]):
            rep.fail(f"n={n}: deviation grows faster than sqrt(delta + 1): {med[:, b].tolist()}")
    if not np.all(np.isfinite(med)):
        rep.fail("estimator diverged for some delta")
    return rep


# ---------------------------------------------------------------------------


def _map(fn, items, jobs: int):
    """Order-preserving map, optionally over processes; results do not depend on ``jobs``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


CHECKS = {
    "gp": gp_limit_check,
    "ntk": ntk_check,
    "rff": rff_check,
    "flow": flow_check,
    "misspec": misspecification_check,
}
