"""Command-line interface: ``sharing-brrr {fit,predict,bench,synth,verify}``.

Exit codes: 0 success, 1 numerical or statistical failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (CONDITION, mc_prior_predictive_variance, prior_predictive_variance,
                        truncation_variance_ratio)
from .bench import BenchConfig, emit_report, run_benchmark, timing_curve, write_timing_curve
from .config import Config, ConfigError, load_config
from .data import (DataFormatError, SynthConfig, _read_table, cca_screen, load_dataset, save_dataset, standardize,
                   synth_generate, write_table)
from .gibbs import ChainError, ChainSchedule, run_chain
from .model import (VARIANTS, Dataset, DimensionError, Hyperparameters, ModelVariant, NumericalError,
                    TruncationAdaptation)
from .persist import ArtifactError, load_model, save_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "SHARING_BRRR_THREADS"
MODEL_FILE = "model.sbrrr"


class UsageError(Exception):
    pass


def _say(*args):
    print(*args, flush=True)


def _threads(args, cfg: Config) -> int:
    if args.threads is not None:
        n = args.threads
    elif cfg.get("threads") is not None:
        n = cfg.get("threads")
    else:
        n = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(n)
    except (TypeError, ValueError):
        raise UsageError(f"thread count must be an integer (got {n!r})")
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _seed(args, cfg: Config) -> int:
    if args.seed is not None:
        return args.seed
    s = cfg.get("seed", 0)
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise cfg.error("seed", "must be a non-negative integer")
    return s


def _out_dir(args, cfg: Config, default="out") -> Path:
    d = Path(args.out_dir or cfg.get("out_dir") or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> Config:
    return load_config(args.config) if args.config else Config()


def _build(cls, cfg: Config, key: str, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise cfg.error(key, str(exc)) from exc
    except ValueError as exc:
        raise cfg.error(key, str(exc)) from exc


def variant_from(cfg: Config, args=None) -> ModelVariant:
    m = cfg.section("model")
    name = m.get("variant", "sharing")
    if name not in VARIANTS:
        raise cfg.error("model.variant", f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    v = VARIANTS[name]._asdict()
    for k in v:
        if k in m:
            v[k] = bool(m[k])
    if args is not None:
        if args.no_sharing:
            v["share_information"] = False
        if args.no_group_sparsity:
            v["group_sparsity"] = False
        if args.no_noise_factors:
            v["use_noise_factors"] = False
    return ModelVariant(**v)


def hyper_from(cfg: Config, variant: ModelVariant = None) -> Hyperparameters:
    m = cfg.section("model")
    h = dict(m.get("hyper") or {})
    if "adapt" in m:
        a = m["adapt"]
        h["adapt"] = None if a is None else _build(TruncationAdaptation, cfg, "model.adapt", dict(a))
    return _build(Hyperparameters, cfg, "model.hyper", h)


def schedule_from(cfg: Config, seed: int) -> ChainSchedule:
    s = cfg.section("schedule")
    s["seed"] = seed
    return _build(ChainSchedule, cfg, "schedule", s)


def _load_training_data(cfg: Config, args):
    d = cfg.section("data")
    for key in ("x_path", "y_path", "groups_path"):
        if getattr(args, key.split("_")[0], None):
            d[key] = getattr(args, key.split("_")[0])
    for key in ("x_path", "y_path"):
        if not d.get(key):
            raise (cfg.error(f"data.{key}", "required field is missing") if cfg.path else
                   UsageError(f"data.{key} is required (config file or --{key.split('_')[0]})"))
    data = load_dataset(d["x_path"], d["y_path"], d.get("groups_path"))
    screen = d.get("screen")
    if screen:
        keep = np.sort(cca_screen(data.X, data.Y, int(screen)))
        data = Dataset(data.X[:, keep], data.Y, data.groups, [data.feature_names[j] for j in keep],
                       data.target_names, data.ids)
    stats = None
    if d.get("standardize", True):
        data, stats = standardize(data)
    return data, stats


def cmd_fit(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    variant = variant_from(cfg, args)
    hyper = hyper_from(cfg, variant)
    sched = schedule_from(cfg, seed)
    data, stats = _load_training_data(cfg, args)
    out = _out_dir(args, cfg)
    log_lines = [f"sharing-brrr {__version__} fit", f"variant {variant.name} {tuple(variant)}",
                 f"data N={data.N} P={data.P} K={data.K} M={data.groups.M}", f"schedule {asdict(sched)}"]
    _say("\n".join(log_lines))
    t0 = time.perf_counter()
    every = max(1, sched.total_iters // 20)

    def progress(it, state):
        if it % every == 0:
            _say(f"iteration {it}/{sched.total_iters} ranks S1={state.S1} S2={state.S2} "
                 f"elapsed {time.perf_counter() - t0:.1f}s")

    store = run_chain(data, hyper, variant, sched, trace_every=max(1, sched.total_iters // 1000),
                      callback=progress)
    elapsed = time.perf_counter() - t0
    path = out / MODEL_FILE
    save_model(path, store, dims=dict(zip("NPK", data.dims), M=data.groups.M), groups=data.groups, hyper=hyper,
               feature_names=data.feature_names, target_names=data.target_names, standardization=stats)
    log_lines += ["", "rank trajectory (iteration S1 S2):"]
    for it in range(0, sched.total_iters, every):
        log_lines.append(f"{it + 1} {store.rank_trace[it, 0]} {store.rank_trace[it, 1]}")
    log_lines.append(f"{sched.total_iters} {store.rank_trace[-1, 0]} {store.rank_trace[-1, 1]}")
    log_lines += ["", f"retained draws {len(store)}", f"total seconds {elapsed:.3f}",
                  f"mean seconds per sweep {np.mean(store.sweep_times):.6f}",
                  f"final log joint {store.log_joint[-1]:.6f}", f"model {path}"]
    (out / "fit.log").write_text("\n".join(log_lines) + "\n")
    _say(f"wrote {path} and {out / 'fit.log'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    art = load_model(args.model)
    ids, names, X = _read_table(args.x, "X")
    if X.shape[1] != art.P:
        raise DimensionError(f"X has P={X.shape[1]} columns but the model expects P={art.P}")
    std = art.standardization
    if std is not None:
        X = (X - std.x_mean) / std.x_sd
    pred = art.store.predict(X)
    if args.destandardize:
        if std is None:
            raise UsageError("model was fitted without standardization; nothing to undo")
        pred = pred * std.y_sd + std.y_mean
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, ids, art.target_names, pred)
    _say(f"wrote {out} ({pred.shape[0]} rows, {pred.shape[1]} targets)")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    s = cfg.section("synth")
    s["seed"] = _seed(args, cfg) if args.seed is not None or "seed" not in s else s["seed"]
    sc = _build(SynthConfig, cfg, "synth", s)
    train, test, truth = synth_generate(sc)
    out = _out_dir(args, cfg, "synth")
    save_dataset(train, out / "x_train.csv", out / "y_train.csv", out / "groups.csv")
    save_dataset(test, out / "x_test.csv", out / "y_test.csv", out / "groups.csv")
    np.savez(out / "truth.npz", **truth._asdict())
    (out / "synth.json").write_text(json.dumps(sc.to_dict(), indent=1, sort_keys=True))
    _say(f"wrote synthetic data to {out} (train {train.N}, test {test.N}, P={train.P}, K={train.K})")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    b = cfg.section("bench")
    if args.seed is not None or "seed" not in b:
        b["seed"] = _seed(args, cfg)
    b["workers"] = _threads(args, cfg) if args.threads is not None or "workers" not in b else b["workers"]
    timing = b.pop("timing", None)
    bc = _build(BenchConfig, cfg, "bench", b)
    out = _out_dir(args, cfg, "bench")
    report = run_benchmark(bc, out, resume=args.resume, log=_say)
    files = emit_report(report, out)
    if timing:
        if timing is True:
            timing = {}
        if not isinstance(timing, dict):
            raise cfg.error("bench.timing", "must be true or a mapping of timing_curve arguments")
        rows = timing_curve(**timing, seed=bc.seed)
        files.append(write_timing_curve(rows, out / "timing_curve.csv"))
    for f in files:
        _say(f"wrote {f}")
    if report.failures:
        _say(f"{len(report.failures)} failed cells (see report.json)")
        return EXIT_FAIL
    return EXIT_OK


def _parse_s1(text) -> list:
    if isinstance(text, (list, tuple)):
        vals = list(text)
    else:
        vals = [v for v in str(text).split(",") if v.strip()]
    try:
        vals = [int(v) for v in vals]
    except ValueError:
        raise UsageError(f"--s1 must be a comma-separated list of integers (got {text!r})")
    if not vals or min(vals) < 1:
        raise UsageError("--s1 values must be >= 1")
    return vals


def cmd_verify(args) -> int:
    cfg = _config(args)
    v = cfg.section("verify")
    a3 = args.a3 if args.a3 is not None else v.get("a3", 3.0)
    a4 = args.a4 if args.a4 is not None else v.get("a4", 4.0)
    nu = args.nu if args.nu is not None else v.get("nu", 5.0)
    if not (a3 > 2 and a4 > 3):
        raise UsageError(f"domain error: the prior predictive variance is finite only when a3 > 2 and a4 > 3; "
                         f"verification {CONDITION} (got a3={a3}, a4={a4})")
    if not nu > 2:
        raise UsageError(f"domain error: nu must be > 2 (got {nu})")
    prop = str(args.prop or v.get("prop", "all"))
    if prop not in ("1", "2", "3", "all"):
        raise UsageError(f"--prop must be 1, 2, 3 or all (got {prop})")
    budget = int(args.budget or v.get("budget", 200_000))
    if budget < 1000:
        raise UsageError(f"--budget must be at least 1000 draws (got {budget})")
    trunc = int(v.get("truncation", 40))
    s1s = _parse_s1(args.s1 if args.s1 is not None else v.get("s1", [1, 2, 3]))
    seed = args.seed if args.seed is not None else v.get("seed", cfg.get("seed", 0))
    hyper = Hyperparameters(a3=a3, a4=a4, nu=nu)
    full = prior_predictive_variance(a3, a4, nu, 1.0)
    ok = True
    if prop in ("1", "2", "all"):
        est = mc_prior_predictive_variance(hyper, 1, trunc, budget, rng=seed)
        if prop in ("1", "all"):
            z = (est.estimate - full) / est.std_error
            passed = abs(z) < 3
            ok &= passed
            _say(f"prop1 closed_form={full:.6f} estimate={est.estimate:.6f} se={est.std_error:.6f} z={z:+.3f} "
                 f"rel_err={est.estimate / full - 1:+.4f} {'PASS' if passed else 'FAIL'}")
        if prop in ("2", "all"):
            z = est.mean / est.mean_std_error
            passed = abs(z) < 3
            ok &= passed
            _say(f"prop2 mean=0 estimate={est.mean:+.6f} se={est.mean_std_error:.6f} z={z:+.3f} "
                 f"{'PASS' if passed else 'FAIL'}")
    if prop in ("3", "all"):
        for i, s in enumerate(s1s):
            ratio = truncation_variance_ratio(a4, s)
            est = mc_prior_predictive_variance(hyper, 1, s, budget, rng=np.random.SeedSequence(seed, spawn_key=(3, i)))
            expected = full * (1 - ratio)
            z = (est.estimate - expected) / est.std_error
            passed = abs(z) < 3
            ok &= passed
            _say(f"prop3 S1={s} lost_fraction={ratio:.6g} captured_closed_form={expected:.6f} "
                 f"estimate={est.estimate:.6f} se={est.std_error:.6f} est_lost_fraction={1 - est.estimate / full:.6f} "
                 f"z={z:+.3f} {'PASS' if passed else 'FAIL'}")
    _say("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help=f"worker count (default ${THREADS_ENV} or 1)")
    common.add_argument("--out-dir", help="output directory")

    p = argparse.ArgumentParser(prog="sharing-brrr", description="Information-sharing Bayesian reduced-rank regression")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="run the Gibbs sampler and save a model artifact")
    f.add_argument("--x", help="predictor CSV (overrides data.x_path)")
    f.add_argument("--y", help="response CSV (overrides data.y_path)")
    f.add_argument("--groups", help="response group CSV (overrides data.groups_path)")
    f.add_argument("--no-sharing", action="store_true", help="disable residual-correlation sharing in the prior")
    f.add_argument("--no-group-sparsity", action="store_true", help="one local precision per regression row")
    f.add_argument("--no-noise-factors", action="store_true", help="drop the latent noise factors")
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", parents=[common], help="posterior-mean predictions for new predictors")
    q.add_argument("--model", required=True, help="model artifact written by fit")
    q.add_argument("--x", required=True, help="predictor CSV")
    q.add_argument("--out", required=True, help="output CSV")
    q.add_argument("--destandardize", action="store_true", help="return predictions in original response units")
    q.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", parents=[common], help="run a benchmark grid and write report tables")
    b.add_argument("--resume", action="store_true", help="skip cells already recorded in out-dir/cells.jsonl")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", parents=[common], help="Monte Carlo checks of the prior variance results")
    v.add_argument("--prop", choices=["1", "2", "3", "all"], help="which check to run (default all)")
    v.add_argument("--s1", help="comma-separated truncation levels for --prop 3 (default 1,2,3)")
    v.add_argument("--budget", type=int, help="Monte Carlo draws per check (default 200000)")
    v.add_argument("--a3", type=float)
    v.add_argument("--a4", type=float)
    v.add_argument("--nu", type=float)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataFormatError, ArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return EXIT_USAGE
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return EXIT_USAGE
    except (ChainError, NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr, flush=True)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
