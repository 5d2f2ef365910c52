"""Config-driven construction of datasets and models shared by the CLI and tests."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Parameters
from .data import (CaseParams, CsvSchema, EventSequence, Examples, SplitSpec, Stats, fit_stats,
                   load_csv, make_splits, sample_case, simulate_ctar2, split_sequence,
                   timespan_transform)
from .kernels import Ctar2Params, FeatureMap
from .models import (FfnSpec, GruSpec, MULTIPLY, TemporalFFN, TemporalGRU, TimeConcatGRU,
                     TimeFFN, TrigoFFN, TrigoGRU)
from .spectral import FlowSpectral, GaussianSpectral
from .train import TrainConfig

MODEL_KINDS = ("t-rnn", "t-ffn", "rnn-time", "rnn-trigo", "ffn-time", "ffn-trigo")

DEFAULT_CONFIG: dict = {
    "data": {
        "source": "ctar2",
        "csv": None,
        "missing_as_zero": False,
        "a0": 0.05, "a1": 4.0, "b0": 1.0, "p0": 1.0,
        "fine_dt": 0.001,
        "dt": 0.1,
        "n_points": 3000,
        "case": 2,
        "window": 30,
        "q": 8,
        "horizon": 5,
        "offset_range": [1, 30],
        "stride": 1,
        "split": "side-by-side",
        "fractions": [0.6, 0.2, 0.2],
        "time_scale": 1.0,
    },
    "model": {
        "kind": "t-rnn",
        "hidden": 32,
        "head": [32, 1],
        "mode": MULTIPLY,
        "feedback": True,
        "readout": "last",
        "m": 16,
        "trigo_k": 16,
        "ffn_hidden": [32],
        "compose_at": 1,
    },
    "spectral": {
        "family": "gaussian",
        "feature_mode": "nonstationary",
        "layers": 4,
        "hidden": 32,
    },
    "train": {"lr": 3e-3},
    "verify": {},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    user = json.loads(Path(path).read_text()) if path else {}
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for section in ("data", "model", "spectral"):
        extra = set(user.get(section, {})) - set(DEFAULT_CONFIG[section])
        if extra:
            raise ValueError(f"unknown keys in config section {section!r}: {sorted(extra)}")
    extra = set(user.get("train", {})) - {f.name for f in fields(TrainConfig)}
    if extra:
        raise ValueError(f"unknown keys in config section 'train': {sorted(extra)}")
    return deep_merge(deep_merge(DEFAULT_CONFIG, user), overrides or {})


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    train: Examples
    val: Examples
    test: Examples
    stats: Stats
    series: EventSequence


def load_series(dcfg: dict, seed: int) -> EventSequence:
    if dcfg["source"] == "csv":
        if not dcfg.get("csv"):
            raise ValueError("data.source is 'csv' but data.csv is not set")
        return load_csv(dcfg["csv"], CsvSchema(missing_as_zero=bool(dcfg.get("missing_as_zero"))))
    if dcfg["source"] != "ctar2":
        raise ValueError(f"unknown data source {dcfg['source']!r}")
    p = ctar2_params(dcfg)
    every = int(round(dcfg["dt"] / dcfg["fine_dt"]))
    if every < 1 or abs(every * dcfg["fine_dt"] - dcfg["dt"]) > 1e-12:
        raise ValueError("data.dt must be a positive multiple of data.fine_dt")
    t, f = simulate_ctar2(p, dcfg["fine_dt"], dcfg["n_points"] * dcfg["dt"], seed=seed, record_every=every)
    return EventSequence(t, f)


def ctar2_params(dcfg: dict) -> Ctar2Params:
    return Ctar2Params(a0=dcfg["a0"], a1=dcfg["a1"], b0=dcfg["b0"], p0=dcfg["p0"])


def case_params(dcfg: dict) -> CaseParams:
    return CaseParams(window=dcfg["window"], q=dcfg["q"], horizon=dcfg["horizon"],
                      offset_range=tuple(dcfg["offset_range"]), stride=dcfg["stride"])


def build_dataset(cfg: dict, seed: int) -> Dataset:
    """Simulate or load, split chronologically, sample examples, transform, standardize."""
    dcfg = cfg["data"]
    series = load_series(dcfg, seed)
    spec = SplitSpec(scheme=dcfg["split"], fractions=tuple(dcfg["fractions"]))
    split = make_splits(series, spec)[0]
    parts = split_sequence(series, split)
    rng = np.random.default_rng([seed, 1])
    cp = case_params(dcfg)
    ex = [timespan_transform(sample_case(s, dcfg["case"], cp, rng), dcfg["time_scale"]) for s in parts]
    # one set of statistics from the training portion: targets and features share a scale
    # for univariate series; multivariate features get their own columns
    y_stats = fit_stats(ex[0].y)
    x_stats = fit_stats(ex[0].x.reshape(-1, ex[0].x.shape[-1]))
    norm = [Examples(x_stats.apply(e.x), e.t, y_stats.apply(e.y), e.t_target, e.timespan) for e in ex]
    return Dataset(*norm, stats=y_stats, series=series)


# ---------------------------------------------------------------------------
# models


def build_model(cfg: dict, seed: int, input_dim: int, q: int, eps: np.ndarray | None = None):
    """Instantiate ``cfg['model']['kind']``; ``eps`` restores frozen feature-map draws."""
    mcfg = cfg["model"]
    kind = mcfg["kind"]
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    params = Parameters()
    gru = GruSpec(input_dim, mcfg["hidden"], tuple(mcfg["head"]))
    flat_in = q * input_dim
    if kind == "t-rnn":
        fm = _feature_map(cfg, params, input_dim + 1, seed, eps)
        model = TemporalGRU(gru, fm, params, mode=mcfg["mode"], seed=seed,
                            feedback=mcfg["feedback"], readout=mcfg["readout"])
    elif kind == "t-ffn":
        fm = _feature_map(cfg, params, q * (input_dim + 1), seed, eps)
        spec = FfnSpec([flat_in, *mcfg["ffn_hidden"], 1])
        model = TemporalFFN(spec, fm, params, compose_at=mcfg["compose_at"], mode=mcfg["mode"], seed=seed)
    elif kind == "rnn-time":
        model = TimeConcatGRU(gru, params, seed)
    elif kind == "rnn-trigo":
        model = TrigoGRU(gru, params, mcfg["trigo_k"], seed)
    elif kind == "ffn-time":
        model = TimeFFN(FfnSpec([flat_in + q, *mcfg["ffn_hidden"], 1]), params, seed)
    else:
        k = mcfg["trigo_k"]
        model = TrigoFFN(FfnSpec([flat_in + 2 * k * q, *mcfg["ffn_hidden"], 1]), params, k, seed)
    return model


def _feature_map(cfg: dict, params: Parameters, input_dim: int, seed: int, eps) -> FeatureMap:
    scfg, mcfg = cfg["spectral"], cfg["model"]
    mode = scfg["feature_mode"]
    dim = input_dim if mode == "stationary" else 2 * input_dim
    if scfg["family"] == "gaussian":
        sampler = GaussianSpectral(dim, params)
    elif scfg["family"] == "flow":
        sampler = FlowSpectral(dim, params, n_layers=scfg["layers"], hidden=scfg["hidden"], seed=seed)
    else:
        raise ValueError(f"unknown spectral family {scfg['family']!r}")
    fm = FeatureMap(sampler, mcfg["m"], input_dim, mode=mode, seed=seed + 1, eps=eps,
                    time_scale=1.0)
    params.add_buffer("spectral/eps", fm.eps)
    return fm


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(**{**cfg["train"], "seed": seed})
