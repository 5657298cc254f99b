"""Command line entry point: ``snk <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

from .bounds import BOUNDS, verify_bound
from .errors import SnkError
from .harness import (
    ExperimentSpec,
    batch_sensitivity,
    build_problem,
    run_ensemble,
    run_label,
    run_one,
    spectrum_probe,
    summarize_dir,
    write_spectrum_csv,
)
from .models import QuadraticProblem
from .optimizer import run

SUBCOMMANDS = ("run", "ensemble", "spectrum", "sensitivity", "verify-bound", "summarize")


def bundled_config(name: str) -> Path:
    """Path of a config file shipped with the package (e.g. ``quadratic.json``)."""
    return Path(str(resources.files("snk") / "configs" / name))


def _common(p: argparse.ArgumentParser, config_required=True):
    p.add_argument("--config", metavar="PATH", required=config_required,
                   help="experiment JSON (problem, configs, seeds) or a flat optimizer config")
    p.add_argument("--out", metavar="DIR", help="output directory (default: $SNK_OUT, then the file's output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snk", description="Stochastic inexact Newton experiments.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("run", help="one run per config for a single seed")
    _common(p)
    p.add_argument("--seed", type=int, help="seed (default: first seed in the file)")

    p = sub.add_parser("ensemble", help="every (config, seed) pair plus summary.csv")
    _common(p)
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="concurrent runs (default 1)")

    p = sub.add_parser("spectrum", help="dominant Hessian spectrum along the first config's iterates")
    _common(p)
    p.add_argument("--seed", type=int, help="seed (default: first seed in the file)")
    p.add_argument("--ranks", type=int, default=30, metavar="N", help="eigenvalues per probe (default 30)")
    p.add_argument("--every", type=int, default=1, metavar="N", help="probe every N-th iterate (default 1)")
    p.add_argument("--batch-size", type=int, metavar="N", help="probe batch size (default: the config's n_s)")

    p = sub.add_parser("sensitivity", help="loss curves for several Hessian batch sizes")
    _common(p)
    p.add_argument("--ns", required=True, metavar="LIST", help="comma-separated n_s values, e.g. 10,100")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="concurrent runs (default 1)")

    p = sub.add_parser("verify-bound", help="Monte Carlo check of a one-step convergence bound")
    _common(p)
    p.add_argument("--bound", default="all", choices=("all",) + BOUNDS, help="bound family (default all)")
    p.add_argument("--trials", type=int, default=1000, metavar="N", help="trials per distance (default 1000)")
    p.add_argument("--distances", default="0.01,0.1,1.0", metavar="LIST", help="comma-separated distances")
    p.add_argument("--seed", type=int, default=0, help="Monte Carlo seed (default 0)")

    p = sub.add_parser("summarize", help="recompute summary.csv from run files in a directory")
    p.add_argument("--dir", required=True, metavar="DIR", help="directory holding *.trace.csv and *.status.json")
    return parser


def _out_dir(args, spec: ExperimentSpec) -> Path:
    out = Path(args.out or os.environ.get("SNK_OUT") or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise SnkError(f"not a comma-separated number list: {text!r}") from None


def _cmd_run(args, spec, out):
    seed = spec.seeds[0] if args.seed is None else args.seed
    for i, cfg in enumerate(spec.configs):
        res = run_one(spec.problem, cfg, seed, out, run_label(i, cfg))
        print(f"{res['label']} seed={seed}: {res['status']} best_train={res['best_train']:.6g} "
              f"-> {out / (res['label'] + f'__seed{seed}.trace.csv')}")
    return 0


def _cmd_ensemble(args, spec, out):
    summary = run_ensemble(spec, jobs=args.jobs, out_dir=out)
    for r in summary.rows:
        print(f"{r.label}: {r.n_completed} completed, {r.n_failed} failed, mean train {r.train[0]:.6g}")
    print(f"summary -> {summary.path}")
    return 0


def _cmd_spectrum(args, spec, out):
    seed = spec.seeds[0] if args.seed is None else args.seed
    cfg = spec.configs[0].replace(seed=seed, checkpoint_every=args.every)
    model, train, test = build_problem(spec.problem)
    trace = run(model, train, test, cfg)
    rows = spectrum_probe(model, trace, train, test, ranks=args.ranks, every=args.every,
                          batch_size=args.batch_size, seed=seed)
    path = out / f"{run_label(0, cfg)}__seed{seed}.spectrum.csv"
    write_spectrum_csv(path, rows)
    print(f"spectrum ({len(rows)} rows) -> {path}")
    return 0


def _cmd_sensitivity(args, spec, out):
    values = [int(v) for v in _floats(args.ns)]
    rows, _ = batch_sensitivity(spec, values, out_dir=out, jobs=args.jobs)
    print(f"sensitivity ({len(rows)} rows) -> {out / 'sensitivity.csv'}")
    return 0


def _cmd_verify(args, spec, out):
    if spec.problem.get("kind") != "quadratic":
        raise SnkError("verify-bound needs a quadratic problem")
    problem, _, _ = build_problem(spec.problem)
    assert isinstance(problem, QuadraticProblem)
    names = BOUNDS if args.bound == "all" else (args.bound,)
    failed = []
    for name in names:
        rep = verify_bound(name, problem, spec.configs[0], trials=args.trials,
                           distances=tuple(_floats(args.distances)), seed=args.seed)
        (out / f"bound-{name}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        for row in rep.rows:
            flag = "VIOLATED" if row.violated else "ok"
            print(f"{name} delta={row.delta:g}: mean {row.mean_error:.4g} +- {row.std_error:.2g} "
                  f"vs bound {row.bound:.4g} [{flag}]")
        if rep.violations:
            failed.append(name)
    if failed:
        raise SnkError(f"bound violated: {', '.join(failed)}")
    return 0


def _cmd_summarize(args):
    summary = summarize_dir(args.dir)
    for r in summary.rows:
        print(f"{r.label}: {r.n_completed} completed, {r.n_failed} failed, mean train {r.train[0]:.6g}")
    print(f"summary -> {summary.path}")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "ensemble": _cmd_ensemble,
    "spectrum": _cmd_spectrum,
    "sensitivity": _cmd_sensitivity,
    "verify-bound": _cmd_verify,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "summarize":
            return _cmd_summarize(args)
        spec = ExperimentSpec.load(args.config)
        return COMMANDS[args.command](args, spec, _out_dir(args, spec))
    except (SnkError, OSError, ValueError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"snk: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
