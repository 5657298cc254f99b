"""CSV and JSON formats for traces, spectra and ensemble summaries.

Floats are written with 17 significant digits (``%.17g``), which round-trips
every float64 exactly, so parsing and re-emitting a file reproduces it byte
for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

__all__ = [
    "TRACE_HEADER",
    "SPECTRUM_HEADER",
    "PROBE_HEADER",
    "SUMMARY_HEADER",
    "fmt",
    "trace_rows",
    "write_trace_csv",
    "read_trace_csv",
    "write_status_json",
    "read_status_json",
    "write_rows_csv",
    "read_rows_csv",
    "emit_csv",
]

TRACE_HEADER = (
    "k", "sweeps", "train_loss", "test_loss", "grad_norm", "alpha",
    "inner_iters", "termination", "min_rayleigh_or_eig", "wall_time_s",
)
SPECTRUM_HEADER = ("iteration", "rank_index", "eigenvalue")
PROBE_HEADER = ("iteration", "rank_index", "eigenvalue", "split")
SUMMARY_HEADER = (
    "label", "method", "n_completed", "n_failed",
    "train_mean", "train_std", "train_min", "train_median",
    "test_mean", "test_std", "test_min", "test_median",
)
_INT_TRACE = {"k", "inner_iters"}
_STR_TRACE = {"termination"}


def fmt(value) -> str:
    """Canonical text form: ints as ints, floats as %.17g, everything else str()."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return "%.17g" % value
    try:
        import numpy as np

        if isinstance(value, np.integer):
            return str(int(value))
        if isinstance(value, np.floating):
            return "%.17g" % float(value)
    except ImportError:  # pragma: no cover
        pass
    return str(value)


def emit_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_rows_csv(path, header, rows) -> None:
    Path(path).write_text(emit_csv(header, rows))


def _parse(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_rows_csv(path):
    """Header plus rows with ints, floats and strings recovered by content."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        rows = [tuple(_parse(v) for v in row) for row in reader if row]
    return header, rows


def trace_rows(trace):
    for r in trace.records:
        yield (
            int(r.k), float(r.sweeps), float(r.train_loss), float(r.test_loss), float(r.grad_norm),
            float(r.alpha), int(r.inner_iters), r.termination, float(r.min_eig), float(r.wall_time),
        )


def write_trace_csv(path, trace) -> None:
    write_rows_csv(path, TRACE_HEADER, trace_rows(trace))


def read_trace_csv(path):
    """List of dicts keyed by the trace header, with columns typed per the format."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: not a trace file (header {header})")
        out = []
        for row in reader:
            if not row:
                continue
            rec = {}
            for key, text in zip(header, row):
                if key in _INT_TRACE:
                    rec[key] = int(text)
                elif key in _STR_TRACE:
                    rec[key] = text
                else:
                    rec[key] = float(text)
            out.append(rec)
    return out


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return _jsonable(value.item())
    return value


def write_status_json(path, trace, label: str, extra: dict | None = None) -> None:
    status = {
        "label": label,
        "method": trace.config.method,
        "seed": trace.config.seed,
        "status": trace.status,
        "error": trace.error,
        "stationary": trace.stationary,
        "best_train": trace.best_train,
        "best_test": trace.best_test,
        "total_sweeps": trace.total_sweeps,
        "iterations": max(len(trace.records) - 1, 0),
        "full_grad_norm": trace.full_grad_norm,
        "forced_steps": trace.forced_steps,
        "config": trace.config.to_dict(),
    }
    if extra:
        status.update(extra)
    Path(path).write_text(json.dumps(_jsonable(status), indent=2, sort_keys=True) + "\n")


def read_status_json(path) -> dict:
    return json.loads(Path(path).read_text())
