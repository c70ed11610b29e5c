"""Evaluation protocol: per-target MSE, predictable subsets, t-tests, benchmark grids."""

from __future__ import annotations

import csv
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .baselines import fit_blm, mean_baseline
from .data import SynthConfig, cca_screen, load_dataset, split, standardize, synth_generate
from .gibbs import ChainSchedule, run_chain
from .model import VARIANTS, Dataset, Hyperparameters

BASELINE = "mean"
METHODS = ("mean", "blm") + tuple(VARIANTS)


class DegenerateInputError(ValueError):
    pass


class TTest(NamedTuple):
    t: float
    dof: float
    p: float


def mse_per_target(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None] if truth.ndim == 1 else truth
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one row")
    return np.mean((pred - truth) ** 2, axis=0)


def predictable_subset(mse_table, baseline_mse) -> np.ndarray:
    """Targets on which at least one method beats the baseline."""
    table = np.atleast_2d(np.asarray(mse_table, dtype=float))
    if table.size == 0:
        raise ValueError("empty MSE table")
    return np.min(table, axis=0) < np.asarray(baseline_mse, dtype=float)


def paired_t_test(errors_a, errors_b) -> TTest:
    """Two-sided paired t-test on ``a - b``."""
    d = np.asarray(errors_a, dtype=float) - np.asarray(errors_b, dtype=float)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    sd = d.std(ddof=1)
    if not sd > 0:
        raise DegenerateInputError("differences have zero variance (identical inputs?)")
    n = d.size
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * sps.t.sf(abs(t), n - 1)
    return TTest(float(t), float(n - 1), float(min(1.0, p)))


def welch_t_test(errors_a, errors_b) -> TTest:
    """Unpaired two-sample t-test without the equal-variance assumption."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if not va + vb > 0:
        raise DegenerateInputError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return TTest(float(t), float(dof), float(2.0 * sps.t.sf(abs(t), dof)))


@dataclass
class BenchConfig:
    """A benchmark grid.

    ``cases`` entries are either ``{"synth": {...SynthConfig fields...}}`` or
    ``{"x_path": ..., "y_path": ..., "groups_path": ...}``.  Synthetic cases
    take their training size from ``n_train`` when a grid is given; loaded
    cases are split at each ``n_train``.
    """

    methods: Sequence[str] = ("mean", "blm", "sharing", "group_sparse", "shrinkage")
    cases: Sequence[dict] = field(default_factory=lambda: [{"synth": {}}])
    n_train: Optional[Sequence[int]] = None
    replicates: int = 1
    seed: int = 0
    schedule: dict = field(default_factory=lambda: {"total_iters": 3000, "burn_in": 1500, "thin": 5})
    hyper: dict = field(default_factory=dict)
    blm: dict = field(default_factory=lambda: {"prior_precision": None})
    screen: Optional[int] = None
    workers: int = 1
    reference: str = "sharing"
    trace_every: int = 10

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.cases:
            raise ValueError("need at least one case")

    @classmethod
    def from_dict(cls, d: dict) -> BenchConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        out["cases"] = list(self.cases)
        out["n_train"] = None if self.n_train is None else list(self.n_train)
        return out


def cell_seed(master: int, *coords: int) -> int:
    """Deterministic 63-bit seed for one grid cell."""
    return int(np.random.SeedSequence(master, spawn_key=tuple(int(c) for c in coords)).generate_state(2, np.uint64)[0]
               >> np.uint64(1))


def _case_data(case: dict, n_train: Optional[int], data_seed: int) -> tuple[Dataset, Dataset]:
    if "synth" in case:
        params = dict(case["synth"])
        if n_train is not None:
            params["n_train"] = n_train
        params["seed"] = data_seed
        train, test, _ = synth_generate(SynthConfig(**params))
        return train, test
    full = load_dataset(case["x_path"], case["y_path"], case.get("groups_path"))
    if n_train is None:
        raise ValueError("loaded datasets need an n_train grid")
    return split(full, n_train, data_seed)


def _fit_predict(method, train, test, config: BenchConfig, chain_seed):
    if method == "mean":
        return mean_baseline(train.Y).predict(test.X), 0
    if method == "blm":
        s = dict(config.schedule)
        s["seed"] = chain_seed
        return fit_blm(train, schedule=ChainSchedule(**s), **config.blm).predict(test.X), s["total_iters"]
    hyper = Hyperparameters(**config.hyper)
    sched = ChainSchedule(seed=chain_seed, **config.schedule)
    store = run_chain(train, hyper, VARIANTS[method], sched, trace_every=config.trace_every)
    return store.predict(test.X), sched.total_iters


def run_cell(config: BenchConfig, case_index: int, n_train: Optional[int], replicate: int) -> dict:
    """Fit every method on one (case, n_train, replicate) cell."""
    ni = -1 if n_train is None else int(n_train)
    data_seed = cell_seed(config.seed, case_index, replicate)
    chain_seed = cell_seed(config.seed, case_index, replicate, ni + 1, 1)
    out = {"test_case": case_index, "n_train": n_train, "replicate": replicate,
           "records": [], "timings": [], "failures": []}
    try:
        train, test = _case_data(config.cases[case_index], n_train, data_seed)
        if config.screen is not None and config.screen < train.P:
            keep = np.sort(cca_screen(train.X, train.Y, config.screen))
            train = Dataset(train.X[:, keep], train.Y, train.groups,
                            [train.feature_names[j] for j in keep], train.target_names)
            test = Dataset(test.X[:, keep], test.Y, test.groups,
                           [test.feature_names[j] for j in keep], test.target_names)
        train, stats = standardize(train)
        test, _ = standardize(test, stats)
    except Exception as exc:
        for m in config.methods:
            out["failures"].append({"method": m, "error": f"data: {exc}"})
        return out
    if out["n_train"] is None:
        out["n_train"] = train.N
    for method in config.methods:
        t0 = time.perf_counter()
        try:
            pred, sweeps = _fit_predict(method, train, test, config, chain_seed)
        except Exception as exc:
            out["failures"].append({"method": method, "error": f"{type(exc).__name__}: {exc}",
                                    "traceback": traceback.format_exc(limit=3)})
            continue
        seconds = time.perf_counter() - t0
        for k, v in enumerate(mse_per_target(pred, test.Y)):
            out["records"].append({"method": method, "target": test.target_names[k], "mse": float(v)})
        out["timings"].append({"method": method, "seconds": seconds, "sweeps": sweeps})
    return out


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    methods: list = field(default_factory=list)
    reference: str = "sharing"
    baseline: str = BASELINE
    config: Optional[dict] = None

    def _sorted(self):
        order = {m: i for i, m in enumerate(sorted(self.methods))}
        key = lambda r: (r["test_case"], r["n_train"], r["replicate"], order.get(r["method"], -1), str(r.get("target", "")))
        self.records.sort(key=key)
        self.timings.sort(key=key)
        self.failures.sort(key=key)

    def n_train_values(self) -> list:
        return sorted({r["n_train"] for r in self.records})

    def mse_array(self, method: str, n_train) -> tuple[np.ndarray, list]:
        """MSEs of one method as (units x targets), units = (test_case, replicate)."""
        rows = {}
        targets = []
        for r in self.records:
            if r["method"] == method and r["n_train"] == n_train:
                rows.setdefault((r["test_case"], r["replicate"]), {})[r["target"]] = r["mse"]
                if r["target"] not in targets:
                    targets.append(r["target"])
        units = sorted(rows)
        arr = np.array([[rows[u].get(t, np.nan) for t in targets] for u in units]) if units else np.zeros((0, 0))
        return arr, units

    def predictable_mask(self, n_train) -> np.ndarray:
        """Per (unit, target): some non-baseline method beats the baseline."""
        base, _ = self.mse_array(self.baseline, n_train)
        others = [self.mse_array(m, n_train)[0] for m in self.methods if m != self.baseline]
        others = [o for o in others if o.shape == base.shape]
        if base.size == 0 or not others:
            return np.zeros(base.shape, dtype=bool)
        return np.min(np.stack(others), axis=0) < base

    def replicate_means(self, method: str, n_train, predictable: bool = False) -> np.ndarray:
        """Mean MSE per (test_case, replicate) unit, optionally over the predictable targets only.

        Units with no predictable target give NaN.
        """
        arr, _ = self.mse_array(method, n_train)
        if not predictable:
            return arr.mean(axis=1)
        mask = self.predictable_mask(n_train)
        if mask.shape != arr.shape:
            raise ValueError(f"method {method!r} is missing cells for n_train={n_train}")
        counts = mask.sum(axis=1)
        sums = np.where(mask, arr, 0.0).sum(axis=1)
        return np.divide(sums, counts, out=np.full(len(counts), np.nan), where=counts > 0)

    def summary(self) -> dict:
        out = {}
        for n in self.n_train_values():
            entry = {"mean_mse": {}, "mean_mse_predictable": {}, "t_tests": {}, "t_tests_predictable": {}}
            mask = self.predictable_mask(n)
            ref, _ = self.mse_array(self.reference, n)
            entry["n_predictable"] = int(mask.sum())
            for m in self.methods:
                arr, _ = self.mse_array(m, n)
                if arr.size == 0:
                    continue
                entry["mean_mse"][m] = float(np.mean(arr))
                entry["mean_mse_predictable"][m] = float(np.mean(arr[mask])) if mask.any() and arr.shape == mask.shape else None
                if m == self.reference or ref.shape != arr.shape:
                    continue
                pmask = mask if mask.shape == arr.shape else np.zeros(arr.shape, dtype=bool)
                for key, sel in (("t_tests", np.ones(arr.shape, dtype=bool)), ("t_tests_predictable", pmask)):
                    try:
                        entry[key][m] = paired_t_test(ref[sel], arr[sel])._asdict()
                    except (DegenerateInputError, ValueError) as exc:
                        entry[key][m] = {"t": None, "dof": None, "p": None, "note": str(exc)}
            times = {}
            for t in self.timings:
                if t["n_train"] == n:
                    times.setdefault(t["method"], []).append(t)
            entry["timings"] = {
                m: {"mean_seconds": float(np.mean([t["seconds"] for t in ts])),
                    "mean_seconds_per_sweep": (float(np.mean([t["seconds"] / t["sweeps"] for t in ts]))
                                               if all(t["sweeps"] for t in ts) else None)}
                for m, ts in times.items()}
            out[str(n)] = entry
        return out

    def to_dict(self) -> dict:
        self._sorted()
        return {"version": 1, "reference": self.reference, "baseline": self.baseline,
                "methods": list(self.methods), "config": self.config,
                "records": self.records, "timings": self.timings, "failures": self.failures,
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(records=d["records"], timings=d["timings"], failures=d["failures"], methods=d["methods"],
                   reference=d["reference"], baseline=d["baseline"], config=d.get("config"))

    def add_cell(self, cell: dict) -> None:
        coords = {k: cell[k] for k in ("test_case", "n_train", "replicate")}
        self.records += [{**r, **coords} for r in cell["records"]]
        self.timings += [{**t, **coords} for t in cell["timings"]]
        self.failures += [{**f, **coords} for f in cell["failures"]]


def _cells(config: BenchConfig):
    grid = [None] if config.n_train is None else list(config.n_train)
    for ci in range(len(config.cases)):
        for n in grid:
            for rep in range(config.replicates):
                yield ci, n, rep


def _cell_key(ci, n, rep):
    return f"{ci}/{'-' if n is None else n}/{rep}"


def run_benchmark(config: BenchConfig, out_dir=None, resume: bool = False, log=None) -> EvalReport:
    """Fit every (method, case, n_train, replicate) cell and collect an :class:`EvalReport`.

    With ``out_dir`` each finished cell is appended to ``cells.jsonl`` there;
    ``resume=True`` skips cells already recorded in that file.
    """
    done = {}
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "cells.jsonl"
        if resume and ckpt.exists():
            for line in ckpt.read_text().splitlines():
                if line.strip():
                    c = json.loads(line)
                    done[c["key"]] = c
        elif ckpt.exists():
            ckpt.unlink()
    todo = [c for c in _cells(config) if _cell_key(*c) not in done]
    results = dict(done)

    def record(args, cell):
        cell["key"] = _cell_key(*args)
        results[cell["key"]] = cell
        if ckpt is not None:
            with open(ckpt, "a") as fh:
                fh.write(json.dumps(cell) + "\n")
        if log is not None:
            log(f"cell {cell['key']} done ({len(cell['records'])} records, {len(cell['failures'])} failures)")

    if config.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            for args, cell in zip(todo, ex.map(_run_cell_args, [(config, *c) for c in todo])):
                record(args, cell)
    else:
        for args in todo:
            record(args, run_cell(config, *args))

    report = EvalReport(methods=list(config.methods),
                        reference=config.reference if config.reference in config.methods else config.methods[0],
                        config=config.to_dict())
    for key in sorted(results):
        report.add_cell(results[key])
    report._sorted()
    return report


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: EvalReport, path, fmt: str = "all") -> list[Path]:
    """Write ``report.json`` and the CSV tables into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    d = report.to_dict()
    if fmt in ("all", "json"):
        p = out / "report.json"
        p.write_text(json.dumps(d, indent=1, sort_keys=True))
        written.append(p)
    if fmt not in ("all", "csv"):
        return written
    s = d["summary"]
    ns = report.n_train_values()
    methods = list(report.methods)

    p = out / "mse_long.csv"
    _write_csv(p, ["method", "n_train", "replicate", "target", "mse", "test_case"],
               [[r["method"], r["n_train"], r["replicate"], r["target"], repr(r["mse"]), r["test_case"]]
                for r in report.records])
    written.append(p)

    def fmt_num(v):
        return "" if v is None else repr(v)

    p = out / "table1.csv"
    _write_csv(p, ["method"] + [f"n_train={n}" for n in ns],
               [[m] + [fmt_num(s[str(n)]["mean_mse"].get(m)) for n in ns] for m in methods])
    written.append(p)

    p = out / "table2.csv"
    rows = []
    if all(s[str(n)]["n_predictable"] == 0 for n in ns):
        rows.append(["empty subset"] + ["" for _ in ns])
    rows += [[m] + [fmt_num(s[str(n)]["mean_mse_predictable"].get(m)) for n in ns] for m in methods]
    _write_csv(p, ["method"] + [f"n_train={n}" for n in ns], rows)
    written.append(p)

    p = out / "pvalues.csv"
    rows = []
    for n in ns:
        for subset, key in (("all", "t_tests"), ("predictable", "t_tests_predictable")):
            for m, t in s[str(n)][key].items():
                rows.append([m, n, subset, fmt_num(t.get("t")), fmt_num(t.get("dof")), fmt_num(t.get("p"))])
    _write_csv(p, ["method", "n_train", "subset", "t", "dof", "p"], rows)
    written.append(p)

    p = out / "timings.csv"
    rows = []
    for n in ns:
        for m, t in s[str(n)]["timings"].items():
            rows.append([m, n, repr(t["mean_seconds"]), fmt_num(t["mean_seconds_per_sweep"])])
    _write_csv(p, ["method", "n_train", "seconds", "seconds_per_sweep"], rows)
    written.append(p)
    return written


def timing_curve(sizes=(500, 1000, 2000, 4000), methods=("sharing", "group_sparse", "shrinkage", "blm"),
                 P: int = 50, K: int = 16, M: int = 4, sweeps: int = 200, seed: int = 0,
                 hyper: Optional[Hyperparameters] = None) -> list[dict]:
    """Training time against training-set size on synthetic data.

    BRRR ranks are fixed at their initial values so that per-sweep cost is
    comparable across sizes.
    """
    hyper = hyper or Hyperparameters(adapt=None)
    rows = []
    for n in sizes:
        train, _, _ = synth_generate(SynthConfig(n_train=n, n_test=1, P=P, K=K, M=M, seed=seed))
        train, _ = standardize(train)
        for m in methods:
            t0 = time.perf_counter()
            sched = ChainSchedule(sweeps, sweeps // 2, 1, seed)
            if m == "blm":
                fit_blm(train, None, schedule=sched)
            elif m == "mean":
                mean_baseline(train.Y)
            else:
                run_chain(train, hyper, VARIANTS[m], sched, trace_every=sweeps)
            sec = time.perf_counter() - t0
            rows.append({"method": m, "N": n, "seconds": sec, "sweeps": sweeps, "seconds_per_sweep": sec / sweeps})
    return rows


def write_timing_curve(rows, path) -> Path:
    path = Path(path)
    _write_csv(path, ["method", "N", "seconds", "sweeps", "seconds_per_sweep"],
               [[r["method"], r["N"], repr(r["seconds"]), r["sweeps"], repr(r["seconds_per_sweep"])] for r in rows])
    return path


def default_workers() -> int:
    env = os.environ.get("SHARING_BRRR_THREADS")
    return max(1, int(env)) if env else 1
