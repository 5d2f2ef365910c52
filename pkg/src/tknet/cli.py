"""Command-line interface: ``tknet {simulate,sdf-demo,train,eval,verify}``.

Every command takes ``--config``, ``--seed`` and ``--out``; it writes a
``config.resolved.json`` beside its CSV outputs.  The exit code is 0 on
success and 1 when a check fails, in which case a JSON failure list is
printed to stdout and saved as ``failures.json``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import theory
from .data import Examples, periodogram, sample_case, save_csv, simulate_ctar2
from .kernels import aliased_sdf, ctar2_sdf, export_sdf_csv
from .pipeline import (MODEL_KINDS, build_dataset, build_model, case_params, ctar2_params,
                       load_series, resolve_config, train_config)
from .train import evaluate, train_loop
from .utils import write_csv


def _prepare(args, overrides: dict | None = None) -> tuple[dict, Path]:
    cfg = resolve_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps({**cfg, "seed": args.seed}, indent=2, sort_keys=True))
    return cfg, out


def _finish(out: Path, failures: list[str]) -> int:
    if failures:
        doc = json.dumps({"failures": failures}, indent=2)
        (out / "failures.json").write_text(doc)
        print(doc)
        return 1
    return 0


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, out = _prepare(args)
    series = load_series({**cfg["data"], "source": "ctar2"}, args.seed)
    save_csv(out / "series.csv", series)
    ex = sample_case(series, cfg["data"]["case"], case_params(cfg["data"]), np.random.default_rng(args.seed))
    write_examples_csv(out / "examples.csv", ex)
    return _finish(out, [])


def write_examples_csv(path, ex: Examples) -> None:
    rows = []
    for i in range(len(ex)):
        for j in range(ex.t.shape[1]):
            rows.append((i, j, ex.t[i, j], *ex.x[i, j], ex.t_target[i], ex.y[i]))
    d = ex.x.shape[2] if ex.x.ndim == 3 else 1
    write_csv(path, ["example", "step", "t", *[f"x{k}" for k in range(d)], "t_target", "y"], rows)


def cmd_sdf_demo(args) -> int:
    cfg, out = _prepare(args)
    dcfg = cfg["data"]
    vcfg = cfg["verify"].get("sdf", {})
    a = float(vcfg.get("interval", 1.0))
    n_samples = int(vcfg.get("samples", 10**6))
    p = ctar2_params({**dcfg, **{k: vcfg[k] for k in ("a0", "a1", "b0", "p0") if k in vcfg}})
    fine_dt = float(vcfg.get("fine_dt", 0.01))
    every = int(round(a / fine_dt))
    _, f = simulate_ctar2(p, fine_dt, (n_samples - 1) * a, seed=args.seed, record_every=every)
    omega, pxx = periodogram(f, nperseg=int(vcfg.get("nperseg", 256)))
    keep = omega > 0
    omega, pxx = omega[keep], pxx[keep]
    s_a = aliased_sdf(p, a, omega)
    # the continuous SDF expressed on the sampled sequence's frequency axis (the k = 0 term)
    s_cont = ctar2_sdf(p, omega / a) / a
    export_sdf_csv(out / "sdf.csv", omega, {"s": s_cont, "s_a": s_a, "periodogram": pxx})
    failures = []
    gap = float(np.max(np.abs(s_a - s_cont) / s_cont))
    bulk = np.abs(omega) <= float(vcfg.get("bulk", 2.0))
    fit = float(np.max(np.abs(pxx[bulk] / s_a[bulk] - 1.0)))
    write_csv(out / "sdf_summary.csv", ["quantity", "value"],
              [("max_rel_gap_s_vs_s_a", gap), ("max_rel_err_periodogram_vs_s_a", fit)])
    if gap <= 0.05:
        failures.append(f"aliased SDF within 5% of the continuous SDF everywhere (max gap {gap:.4f})")
    if fit > 0.15:
        failures.append(f"periodogram deviates from s_a by {fit:.4f} > 0.15 in the bulk")
    return _finish(out, failures)


def cmd_train(args) -> int:
    overrides = {"model": {"kind": args.model}} if args.model else None
    cfg, out = _prepare(args, overrides)
    ds = build_dataset(cfg, args.seed)
    model = build_model(cfg, args.seed, ds.train.x.shape[2], ds.train.x.shape[1])
    tcfg = train_config(cfg, args.seed)
    meta = {"config": cfg, "seed": args.seed}
    res = train_loop(model, ds.train, ds.val, tcfg, history_path=out / "history.csv",
                     checkpoint_path=out / "checkpoint.json", meta=meta)
    ad.save_checkpoint(out / "checkpoint.json", model.params,
                       {**meta, "epoch": res.best_epoch, "val_mae": res.best_val})
    mae = evaluate(model, ds.test, ds.stats)
    write_csv(out / "metrics.csv", ["model", "seed", "best_epoch", "val_mae", "test_mae"],
              [(cfg["model"]["kind"], args.seed, res.best_epoch, res.best_val, mae)])
    return _finish(out, [] if math.isfinite(mae) else ["non-finite test MAE"])


def cmd_eval(args) -> int:
    state, buffers, meta = ad.read_checkpoint(args.checkpoint)
    cfg = meta.get("config")
    if cfg is None:
        raise SystemExit(f"{args.checkpoint}: checkpoint carries no config metadata")
    if args.config:
        cfg = resolve_config(args.config, {k: v for k, v in cfg.items() if k != "data"})
    seed = meta.get("seed", args.seed) if args.data_seed is None else args.data_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps({**cfg, "seed": seed}, indent=2, sort_keys=True))
    ds = build_dataset(cfg, seed)
    model = build_model(cfg, meta.get("seed", 0), ds.test.x.shape[2], ds.test.x.shape[1],
                        eps=buffers.get("spectral/eps"))
    model.params.load_state_dict(state)
    mae = evaluate(model, ds.test, ds.stats)
    write_csv(out / "eval.csv", ["model", "checkpoint", "test_mae"], [(cfg["model"]["kind"], str(args.checkpoint), mae)])
    return _finish(out, [])


def cmd_verify(args) -> int:
    cfg, out = _prepare(args)
    names = list(theory.CHECKS) if args.which == "all" else [args.which]
    failures, summary = [], []
    for name in names:
        kw = dict(cfg["verify"].get(name, {}))
        fn = theory.CHECKS[name]
        if "base_seed" in fn.__code__.co_varnames:
            kw.setdefault("base_seed", args.seed)
        elif "seed" in fn.__code__.co_varnames:
            kw.setdefault("seed", args.seed)
        if "jobs" in fn.__code__.co_varnames:
            kw.setdefault("jobs", args.jobs)
        rep = fn(**kw)
        rep.write_csv(out / f"verify_{name}.csv")
        summary.append((name, "pass" if rep.passed else "fail", "; ".join(rep.failures)))
        failures += [f"{name}: {m}" for m in rep.failures]
    write_csv(out / "verify_summary.csv", ["check", "status", "detail"], summary)
    return _finish(out, failures)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tknet", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config (sections data/model/spectral/train/verify)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--jobs", type=int, default=1, help="worker processes for seed sweeps")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate CTAR(2) data and sampled examples").set_defaults(fn=cmd_simulate)
    sub.add_parser("sdf-demo", parents=[common], help="continuous vs aliased SDF and periodogram").set_defaults(fn=cmd_sdf_demo)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-seed", type=int, default=None, help="data seed (default: the training seed)")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("verify", parents=[common], help="run theory checks")
    p.add_argument("which", choices=[*theory.CHECKS, "all"])
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(json.dumps({"failures": [f"{type(exc).__name__}: {exc}"]}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
