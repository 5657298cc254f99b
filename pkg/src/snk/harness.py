"""Experiment plumbing: problem construction, seed ensembles and their summaries.

An experiment file is JSON::

    {"problem": {"kind": "quadratic", ...},
     "configs": [{"method": "lrsfn", ...}, {"method": "incg", ...}],
     "seeds": [0, 1, 2],
     "output_dir": "out"}

A file without ``configs`` is read as a single flat optimizer config (the
``problem``, ``seeds`` and ``output_dir`` keys are still honoured).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Batch, Dataset, gaussian_mixture, load_dataset_csv, sample_batch
from .errors import ConfigError
from .lowrank import HessianOperator, randomized_eig
from .models import FeedforwardAutoencoder, QuadraticProblem, make_saddle_problem
from .numerics import SeededRng
from .optimizer import OptimizerConfig, run
from .traces import (
    PROBE_HEADER,
    SUMMARY_HEADER,
    read_status_json,
    read_trace_csv,
    write_rows_csv,
    write_status_json,
    write_trace_csv,
)

__all__ = [
    "ExperimentSpec",
    "EnsembleSummary",
    "SummaryRow",
    "build_problem",
    "run_label",
    "run_one",
    "run_ensemble",
    "summary_stats",
    "summarize_dir",
    "spectrum_probe",
    "write_spectrum_csv",
    "batch_sensitivity",
    "SENSITIVITY_HEADER",
]

SENSITIVITY_HEADER = ("label", "n_s", "seed", "k", "sweeps", "train_loss", "test_loss")
PROBLEM_KINDS = ("quadratic", "saddle", "autoencoder")


@dataclass(frozen=True)
class ExperimentSpec:
    problem: dict
    configs: tuple
    seeds: tuple = (0,)
    output_dir: str = "snk-out"

    def __post_init__(self):
        if not self.configs:
            raise ConfigError("an experiment needs at least one optimizer config")
        if not self.seeds:
            raise ConfigError("an experiment needs at least one seed")
        if not isinstance(self.problem, dict):
            raise ConfigError("'problem' must be a JSON object")
        kind = self.problem.get("kind")
        if kind not in PROBLEM_KINDS:
            raise ConfigError(f"problem kind must be one of {', '.join(PROBLEM_KINDS)} (got {kind!r})")
        for s in self.seeds:
            if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2**64:
                raise ConfigError(f"seeds must be unsigned 64-bit integers (got {s!r})")
        object.__setattr__(self, "configs", tuple(self.configs))
        object.__setattr__(self, "seeds", tuple(self.seeds))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise ConfigError("experiment file must hold a JSON object")
        data = dict(data)
        problem = data.pop("problem", {"kind": "quadratic"})
        seeds = data.pop("seeds", [0])
        output_dir = data.pop("output_dir", "snk-out")
        if "configs" in data:
            raw = data.pop("configs")
            if data:
                raise ConfigError(f"unexpected top-level keys: {', '.join(sorted(data))}")
            if not isinstance(raw, list):
                raise ConfigError("'configs' must be a list")
        else:
            raw = [data]
        configs = [OptimizerConfig.from_dict(c) for c in raw]
        return cls(problem, configs, seeds, str(output_dir))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "problem": self.problem,
            "configs": [c.to_dict() for c in self.configs],
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    def labels(self):
        return [run_label(i, c) for i, c in enumerate(self.configs)]


def run_label(index: int, cfg: OptimizerConfig) -> str:
    return f"{index:02d}-{cfg.name}"


def build_problem(problem: dict):
    """``(model, train, test)`` for a problem description."""
    p = dict(problem)
    kind = p.pop("kind", None)
    if kind == "quadratic":
        if "spectrum" in p:
            spectrum = p.pop("spectrum")
        else:
            dim = int(p.pop("dim", 20))
            top = float(p.pop("top", 10.0))
            decay = float(p.pop("decay", 0.7))
            floor = float(p.pop("floor", 0.0))
            spectrum = [max(top * decay**i, floor) for i in range(dim)]
        try:
            model = QuadraticProblem(spectrum, **p)
        except TypeError as exc:
            raise ConfigError(f"bad quadratic parameters: {exc}") from None
        return model, model.train, model.test
    if kind == "saddle":
        name = p.pop("name", "indefinite-quadratic")
        model = make_saddle_problem(name, **p)
        return model, model.train, model.test
    if kind == "autoencoder":
        widths = p.pop("widths", [36, 8, 36])
        model = FeedforwardAutoencoder(
            widths, p.pop("activation", "tanh"), p.pop("output_activation", "identity")
        )
        n_test = int(p.pop("n_test", 128))
        scale = float(p.pop("scale", 1.0))
        if "dataset" in p:
            data = load_dataset_csv(p.pop("dataset"))
            if "test_dataset" in p:
                return model, data, load_dataset_csv(p.pop("test_dataset"))
            if n_test >= len(data):
                raise ConfigError("n_test leaves no training rows")
            n = len(data) - n_test
            return model, data.take(np.arange(n), "train"), data.take(np.arange(n, len(data)), "test")
        n_train = int(p.pop("n_train", 512))
        rng = SeededRng(int(p.pop("seed", 0)))
        data = gaussian_mixture(rng, n_train + n_test, widths[0], **p)
        data = Dataset(scale * data.x, scale * data.y, data.name)
        return model, data.take(np.arange(n_train), "train"), data.take(np.arange(n_train, n_train + n_test), "test")
    raise ConfigError(f"unknown problem kind {kind!r}")


def run_one(problem: dict, cfg: OptimizerConfig, seed: int, out_dir, label: str) -> dict:
    """Run one (config, seed) pair and write its trace and status files."""
    model, train, test = build_problem(problem)
    cfg = cfg.replace(seed=seed)
    trace = run(model, train, test, cfg)
    out = Path(out_dir)
    stem = f"{label}__seed{seed}"
    write_trace_csv(out / f"{stem}.trace.csv", trace)
    write_status_json(out / f"{stem}.status.json", trace, label)
    return {
        "label": label,
        "seed": seed,
        "status": trace.status,
        "best_train": trace.best_train,
        "best_test": trace.best_test,
        "trace": trace,
    }


def _run_one_remote(args):
    res = run_one(*args)
    res.pop("trace")
    return res


@dataclass(frozen=True)
class SummaryRow:
    label: str
    method: str
    n_completed: int
    n_failed: int
    train: tuple  # (mean, std, min, median)
    test: tuple

    def as_tuple(self):
        return (self.label, self.method, self.n_completed, self.n_failed, *self.train, *self.test)


@dataclass
class EnsembleSummary:
    rows: list
    runs: list = field(default_factory=list)
    path: Path | None = None

    def row(self, label: str) -> SummaryRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def summary_stats(values):
    """(mean, std, min, median) of finite values; order-independent."""
    v = np.sort(np.asarray([x for x in values if math.isfinite(x)], dtype=float))
    if v.size == 0:
        return (math.nan,) * 4
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return (float(np.mean(v)), std, float(v[0]), float(np.median(v)))


def _summarize(entries, methods):
    """``entries``: dicts with label, status, best_train, best_test."""
    rows = []
    for label, method in methods:
        mine = [e for e in entries if e["label"] == label]
        done = [e for e in mine if e["status"] != "failed"]
        rows.append(
            SummaryRow(
                label,
                method,
                len(done),
                len(mine) - len(done),
                summary_stats(e["best_train"] for e in done),
                summary_stats(e["best_test"] for e in done),
            )
        )
    return rows


def _write_summary(out_dir, rows) -> Path:
    path = Path(out_dir) / "summary.csv"
    write_rows_csv(path, SUMMARY_HEADER, (r.as_tuple() for r in rows))
    return path


def run_ensemble(spec: ExperimentSpec, jobs: int = 1, out_dir=None) -> EnsembleSummary:
    """Every (config, seed) pair; failed runs are counted, not fatal."""
    out = Path(out_dir or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = spec.labels()
    tasks = [(spec.problem, cfg, seed, str(out), label) for cfg, label in zip(spec.configs, labels) for seed in spec.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_remote, tasks))
    else:
        results = [run_one(*t) for t in tasks]
    rows = _summarize(results, [(label, cfg.method) for cfg, label in zip(spec.configs, labels)])
    path = _write_summary(out, rows)
    return EnsembleSummary(rows, results, path)


def summarize_dir(directory, write: bool = True) -> EnsembleSummary:
    """Recompute the ensemble summary from the trace and status files on disk."""
    directory = Path(directory)
    status_files = sorted(directory.glob("*__seed*.status.json"))
    if not status_files:
        raise ConfigError(f"{directory}: no run status files found")
    entries, methods = [], {}
    for sf in status_files:
        st = read_status_json(sf)
        label = st["label"]
        methods.setdefault(label, st["method"])
        records = read_trace_csv(sf.with_name(sf.name.replace(".status.json", ".trace.csv")))
        entries.append(
            {
                "label": label,
                "status": st["status"],
                "best_train": min((r["train_loss"] for r in records), default=math.nan),
                "best_test": min((r["test_loss"] for r in records), default=math.nan),
            }
        )
    rows = _summarize(entries, sorted(methods.items()))
    path = _write_summary(directory, rows) if write else None
    return EnsembleSummary(rows, entries, path)


def spectrum_probe(model, trace, train, test, ranks: int = 30, every: int = 1, batch_size=None, oversampling=None, seed=0):
    """Dominant Hessian spectrum at checkpointed iterates, on a train and a test batch.

    Returns ``(iteration, rank_index, eigenvalue, split)`` rows, each
    row-group ordered by descending magnitude. The Hessian is the data
    Hessian without the Tikhonov shift. Work is charged to a clone, so the
    trace's own accounting is untouched.
    """
    if not trace.checkpoints:
        raise ConfigError("trace has no checkpointed iterates; run with checkpoint_every > 0")
    if every < 1 or ranks < 1:
        raise ConfigError("ranks and every must be positive")
    model = model.clone()
    d = model.dim
    r = min(ranks, d)
    p = min(trace.config.oversampling if oversampling is None else oversampling, d - r)
    size = batch_size or trace.config.n_s
    rng = SeededRng(seed)
    batches = {}
    for split, data in (("train", train), ("test", test)):
        n = min(size or len(data), len(data))
        batches[split] = sample_batch(rng, data, n) if n < len(data) else data.all()
    rows = []
    for k in sorted(trace.checkpoints):
        if k % every:
            continue
        w = trace.checkpoints[k]
        for split in ("train", "test"):
            sketch_rng = SeededRng(seed).spawn(k * 2 + (split == "test"))
            factor = randomized_eig(HessianOperator(model, w, batches[split], tikhonov=False), r, p, sketch_rng)
            rows.extend((int(k), i, float(lam), split) for i, lam in enumerate(factor.lambdas))
    return rows


def write_spectrum_csv(path, rows) -> None:
    write_rows_csv(path, PROBE_HEADER, rows)


def batch_sensitivity(spec: ExperimentSpec, n_s_values, out_dir=None, jobs: int = 1):
    """Loss-versus-sweeps curves for each Hessian batch size, all else fixed.

    Returns the rows written to ``sensitivity.csv``.
    """
    values = [int(v) for v in n_s_values]
    if not values:
        raise ConfigError("need at least one n_s value")
    configs = [cfg.replace(n_s=v, name=f"{cfg.name}-ns{v}") for cfg in spec.configs for v in values]
    sub = ExperimentSpec(spec.problem, configs, spec.seeds, str(out_dir or spec.output_dir))
    out = Path(sub.output_dir)
    summary = run_ensemble(sub, jobs=jobs, out_dir=out)
    rows = []
    for i, cfg in enumerate(configs):
        label = run_label(i, cfg)
        for seed in spec.seeds:
            for rec in read_trace_csv(out / f"{label}__seed{seed}.trace.csv"):
                rows.append((label, cfg.n_s, seed, rec["k"], rec["sweeps"], rec["train_loss"], rec["test_loss"]))
    write_rows_csv(out / "sensitivity.csv", SENSITIVITY_HEADER, rows)
    return rows, summary
