"""Synthetic continuous-time data, sampling cases, CSV ingestion, splits.

The CTAR(2) system ``f'' + a0 f' + a1 f = b0 eps`` is integrated with
Euler-Maruyama on the state ``(f, f')``.  Eliminating the velocity turns the
scheme into a second-order linear recurrence in ``f`` driven by the normal
increments, which :func:`scipy.signal.lfilter` evaluates exactly and fast.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import signal

from .kernels import Ctar2Params
from .utils import write_csv

SIDE_BY_SIDE = "side-by-side"
WALK_FORWARD = "walk-forward"


# ---------------------------------------------------------------------------
# simulation


def _check_stable(p: Ctar2Params) -> None:
    if not (p.a0 > 0 and p.a1 > 0):
        raise ValueError(f"unstable CTAR(2) parameters: a0={p.a0}, a1={p.a1}")


def _check_discrete(p: Ctar2Params, dt: float) -> None:
    # Jury conditions for the recursion's characteristic polynomial; the effective
    # damping of the Euler scheme is roughly a0 - a1 * dt
    _, (_, c1, c2) = euler_filter(p, dt)
    if not (c2 < 1.0 and 1.0 + c1 + c2 > 0.0 and 1.0 - c1 + c2 > 0.0):
        raise ValueError(f"fine_dt={dt} is too coarse for a0={p.a0}, a1={p.a1}: "
                         "the Euler recursion is not stable (need a0 > a1 * dt)")


def euler_filter(p: Ctar2Params, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """``(b, a)`` such that ``f[n+2]`` is ``lfilter(b, a, xi)[n]`` for standard-normal ``xi``."""
    c = p.b0 * math.sqrt(p.p0 * dt) * dt
    a = np.array([1.0, p.a0 * dt - 2.0, 1.0 - p.a0 * dt + p.a1 * dt * dt])
    return np.array([c]), a


def simulate_from_increments(p: Ctar2Params, dt: float, xi: np.ndarray, f0: float = 0.0,
                             v0: float = 0.0, zi: np.ndarray | None = None):
    """Euler-Maruyama path driven by given standard-normal increments.

    Returns ``(f, zf)`` where ``f`` has ``len(xi) + 2`` points starting at
    ``f0`` (or continues a previous chunk when ``zi`` is given, in which case
    ``f`` has ``len(xi)`` points) and ``zf`` is the filter state.
    """
    _check_stable(p)
    _check_discrete(p, dt)
    b, a = euler_filter(p, dt)
    xi = np.asarray(xi, dtype=np.float64)
    if zi is None:
        f1 = f0 + dt * v0
        zi0 = signal.lfiltic(b, a, y=[f1, f0])
        rest, zf = signal.lfilter(b, a, xi, zi=zi0)
        return np.concatenate([[f0, f1], rest]), zf
    rest, zf = signal.lfilter(b, a, xi, zi=zi)
    return rest, zf


def stationary_state(p: Ctar2Params, rng: np.random.Generator) -> tuple[float, float]:
    """Draw ``(f, f')`` from the stationary law of the continuous system."""
    var_f = p.p0 * p.b0**2 / (2.0 * p.a0 * p.a1)
    var_v = p.p0 * p.b0**2 / (2.0 * p.a0)
    return float(rng.normal() * math.sqrt(var_f)), float(rng.normal() * math.sqrt(var_v))


def simulate_ctar2(p: Ctar2Params, fine_dt: float = 1e-3, horizon: float = 10.0, seed: int = 0,
                   record_every: int = 1, stationary_start: bool = True,
                   chunk: int = 1 << 20) -> tuple[np.ndarray, np.ndarray]:
    """Simulate on ``[0, horizon]`` at step ``fine_dt``; returns ``(t, f)``.

    ``record_every`` keeps every k-th fine-grid point, so very long paths can
    be generated in chunks without holding the fine grid in memory.
    """
    _check_stable(p)
    if fine_dt <= 0 or horizon <= 0:
        raise ValueError("fine_dt and horizon must be > 0")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    _check_discrete(p, fine_dt)
    rng = np.random.default_rng(seed)
    n_steps = int(round(horizon / fine_dt))
    f0, v0 = stationary_state(p, rng) if stationary_start else (0.0, 0.0)
    b, a = euler_filter(p, fine_dt)
    zi = signal.lfiltic(b, a, y=[f0 + fine_dt * v0, f0])
    total = n_steps + 1
    head = np.array([f0, f0 + fine_dt * v0])[:total]
    kept = [head[np.arange(head.size) % record_every == 0]]
    pos = head.size
    while pos < total:
        size = min(chunk, total - pos)
        out, zi = signal.lfilter(b, a, rng.standard_normal(size), zi=zi)
        kept.append(out[np.arange(pos, pos + size) % record_every == 0])
        pos += size
    f = np.concatenate(kept)
    t = np.arange(f.size) * (fine_dt * record_every)
    return t, f


def empirical_autocov(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased sample autocovariance at lags ``0..max_lag`` via FFT."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = x.size
    size = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(x, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[: max_lag + 1] / n
    return acov


def periodogram(x: np.ndarray, nperseg: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Welch estimate ``(omega, S)`` on ``(-pi, pi]`` for a unit-spaced sequence.

    Scaled so that ``S(w) = sum_k cov[k] exp(-i w k)``, the convention of
    :func:`tknet.kernels.aliased_sdf`.
    """
    # one global mean removal; per-segment detrending would bias the lowest bins
    x = np.asarray(x, dtype=np.float64)
    freq, pxx = signal.welch(x - x.mean(), fs=1.0, nperseg=nperseg,
                             return_onesided=False, detrend=False)
    omega = 2.0 * math.pi * freq
    order = np.argsort(omega)
    return omega[order], pxx[order]


# ---------------------------------------------------------------------------
# sequences and sampling cases


@dataclass
class EventSequence:
    timestamps: np.ndarray
    features: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        f = np.asarray(self.features, dtype=np.float64)
        self.features = f[:, None] if f.ndim == 1 else f
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != (self.timestamps.size,):
                raise ValueError("targets length differs from timestamps")
        if self.features.shape[0] != self.timestamps.size:
            raise ValueError(f"{self.timestamps.size} timestamps but {self.features.shape[0]} feature rows")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def values(self) -> np.ndarray:
        """The prediction series: targets if given, else the first feature column."""
        return self.targets if self.targets is not None else self.features[:, 0]

    def slice(self, lo: int, hi: int) -> "EventSequence":
        t = None if self.targets is None else self.targets[lo:hi]
        return EventSequence(self.timestamps[lo:hi], self.features[lo:hi], t)


@dataclass
class Examples:
    """Supervised examples: history ``x (n, q, d)`` at times ``t (n, q)`` and a target."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    t_target: np.ndarray
    timespan: bool = False

    def __len__(self) -> int:
        return self.y.size

    def take(self, idx) -> "Examples":
        return Examples(self.x[idx], self.t[idx], self.y[idx], self.t_target[idx], self.timespan)


@dataclass(frozen=True)
class CaseParams:
    """Sampling setup; all sizes are in grid points of the source sequence.

    window: history length considered; q: points sampled from it (Cases 2/3);
    horizon: target offset after the window end (Case 2; 1 = next point);
    offset_range: inclusive ``(lo, hi)`` target offsets (Case 3).
    """

    window: int = 5
    q: int | None = None
    horizon: int = 1
    offset_range: tuple[int, int] = (1, 10)
    stride: int = 1


def sample_case(seq: EventSequence, case: int, params: CaseParams,
                rng: np.random.Generator | int | None = None) -> Examples:
    rng = np.random.default_rng(rng)
    vals = seq.values
    feats = seq.features
    W = params.window
    if case == 1:
        starts = range(0, len(seq) - W, params.stride)
        idx = [np.arange(s, s + W) for s in starts]
        tgt = [s + W for s in starts]
    elif case in (2, 3):
        q = params.q or W
        if q > W:
            raise ValueError(f"q={q} exceeds window={W}")
        reach = params.horizon if case == 2 else params.offset_range[1]
        lo_off, hi_off = params.offset_range
        if case == 3 and not 1 <= lo_off <= hi_off:
            raise ValueError(f"bad offset range {params.offset_range}")
        starts = range(0, len(seq) - W - reach + 1, params.stride)
        idx, tgt = [], []
        for s in starts:
            pick = np.sort(rng.choice(W, size=q, replace=False)) + s
            off = params.horizon if case == 2 else int(rng.integers(lo_off, hi_off + 1))
            idx.append(pick)
            tgt.append(s + W - 1 + off)
    else:
        raise ValueError(f"unknown case {case}")
    if not idx:
        d = feats.shape[1]
        return Examples(np.zeros((0, 0, d)), np.zeros((0, 0)), np.zeros(0), np.zeros(0))
    idx = np.array(idx)
    tgt = np.array(tgt)
    return Examples(x=feats[idx], t=seq.timestamps[idx], y=vals[tgt], t_target=seq.timestamps[tgt])


def timespan_transform(ex: Examples, scale: float = 1.0) -> Examples:
    """Replace history times by ``scale * (t_target - t_i)``; the target's own timespan is 0."""
    if ex.timespan:
        return ex
    tau = (ex.t_target[:, None] - ex.t) * scale
    return Examples(ex.x, tau, ex.y, np.zeros_like(ex.t_target), timespan=True)


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    time_column: str = "t"
    target_column: str | None = "y"
    missing_as_zero: bool = False


def load_csv(path, schema: CsvSchema = CsvSchema()) -> EventSequence:
    """Header row required; ``t`` column plus numeric features and an optional target."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if schema.time_column not in header:
            raise ValueError(f"{path}: no '{schema.time_column}' column in header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.lower() == "nan":
                    if not schema.missing_as_zero or name == schema.time_column:
                        raise ValueError(f"{path}:{lineno}: missing value in column '{name}'")
                    vals.append(0.0)
                else:
                    vals.append(float(cell))
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    ti = header.index(schema.time_column)
    yi = header.index(schema.target_column) if schema.target_column in header else None
    fcols = [i for i in range(len(header)) if i not in (ti, yi)]
    if not fcols:
        # a bare univariate series: the target doubles as the feature
        if yi is None:
            raise ValueError(f"{path}: no feature or target columns")
        fcols = [yi]
    return EventSequence(data[:, ti], data[:, fcols], None if yi is None else data[:, yi])


def save_csv(path, seq: EventSequence) -> None:
    d = seq.features.shape[1]
    header = ["t"] + [f"x{i}" for i in range(d)] + (["y"] if seq.targets is not None else [])
    cols = [seq.timestamps[:, None], seq.features]
    if seq.targets is not None:
        cols.append(seq.targets[:, None])
    write_csv(path, header, np.hstack(cols).tolist())


# ---------------------------------------------------------------------------
# standardization and splits


@dataclass(frozen=True)
class Stats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def fit_stats(train: np.ndarray) -> Stats:
    train = np.asarray(train, dtype=np.float64)
    flat = train.reshape(-1, train.shape[-1]) if train.ndim > 1 else train.reshape(-1, 1)
    mean = flat.mean(0)
    std = flat.std(0)
    std = np.where(std > 0, std, 1.0)
    if train.ndim == 1:
        return Stats(mean[0], std[0])
    return Stats(mean, std)


def standardize(train, val, test):
    """Normalize all three with the training mean and std; returns ``(train, val, test, stats)``."""
    stats = fit_stats(train)
    return stats.apply(np.asarray(train, float)), stats.apply(np.asarray(val, float)), \
        stats.apply(np.asarray(test, float)), stats


@dataclass(frozen=True)
class SplitSpec:
    scheme: str = SIDE_BY_SIDE
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    window: int = 0
    horizon: int = 0
    stride: int = 0

    def __post_init__(self):
        if self.scheme not in (SIDE_BY_SIDE, WALK_FORWARD):
            raise ValueError(f"unknown split scheme {self.scheme!r}")
        if self.scheme == WALK_FORWARD and min(self.window, self.horizon, self.stride) < 1:
            raise ValueError("walk-forward needs window, horizon, stride >= 1")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def check_disjoint(self) -> None:
        a, b, c = (set(map(int, s)) for s in (self.train, self.val, self.test))
        if a & b or a & c or b & c:
            raise ValueError("train/val/test index sets overlap")


def make_splits(seq, spec: SplitSpec) -> list[Split]:
    """Chronological index splits over the positions of ``seq`` (a sequence or a length)."""
    n = seq if isinstance(seq, int) else len(seq)
    if spec.scheme == SIDE_BY_SIDE:
        f = np.asarray(spec.fractions, dtype=np.float64)
        if f.size != 3 or np.any(f <= 0):
            raise ValueError("fractions must be three positive numbers")
        f = f / f.sum()
        c1 = int(round(n * f[0]))
        c2 = int(round(n * (f[0] + f[1])))
        splits = [Split(np.arange(0, c1), np.arange(c1, c2), np.arange(c2, n))]
    else:
        splits = list(_walk_forward(n, spec))
    for s in splits:
        s.check_disjoint()
    return splits


def _walk_forward(n: int, spec: SplitSpec) -> Iterator[Split]:
    w, h = spec.window, spec.horizon
    start = 0
    while start + w + 2 * h <= n:
        yield Split(np.arange(start, start + w), np.arange(start + w, start + w + h),
                    np.arange(start + w + h, start + w + 2 * h))
        start += spec.stride


def split_sequence(seq: EventSequence, split: Split) -> tuple[EventSequence, EventSequence, EventSequence]:
    parts = []
    for idx in (split.train, split.val, split.test):
        parts.append(seq.slice(int(idx[0]), int(idx[-1]) + 1) if idx.size else None)
    return tuple(parts)  # type: ignore[return-value]


def snap_to_grid(times: Sequence[float], fine_dt: float) -> np.ndarray:
    """Fine-grid indices nearest to ``times`` (error at most ``fine_dt / 2``)."""
    return np.rint(np.asarray(times, dtype=np.float64) / fine_dt).astype(int)
