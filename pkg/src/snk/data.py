"""Datasets, batches, CSV formats and synthetic data generators."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import SeededRng

__all__ = [
    "Dataset",
    "Batch",
    "sample_batch",
    "subsample",
    "load_dataset_csv",
    "save_dataset_csv",
    "gaussian_mixture",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of inputs ``x`` (N x n) and targets ``y`` (N x m)."""

    x: np.ndarray
    y: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float)
        if x.ndim != 2 or y.ndim != 2:
            raise DimensionError("dataset x and y must be 2-D (samples x features)")
        if x.shape[0] != y.shape[0]:
            raise DimensionError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if x.shape[0] == 0:
            raise DimensionError("dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DimensionError("dataset contains non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]

    def all(self) -> "Batch":
        return Batch(self, np.arange(len(self)))

    def take(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.x[indices], self.y[indices], name or self.name)


@dataclass(frozen=True, eq=False)
class Batch:
    """Indices into a dataset.

    Evaluation always visits rows in ascending index order, so results do not
    depend on the order indices were drawn in.
    """

    dataset: Dataset
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.sort(np.asarray(self.indices, dtype=np.int64).ravel())
        if idx.size == 0:
            raise DimensionError("batch must contain at least one sample")
        if idx[0] < 0 or idx[-1] >= len(self.dataset):
            raise DimensionError("batch index out of range")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.size

    @property
    def x(self):
        return self.dataset.x[self.indices]

    @property
    def y(self):
        return self.dataset.y[self.indices]

    def is_subset_of(self, other: "Batch") -> bool:
        return other.dataset is self.dataset and bool(np.all(np.isin(self.indices, other.indices)))


def sample_batch(rng: SeededRng, dataset: Dataset, size: int, replacement: bool = False) -> Batch:
    """Uniform random batch of ``size`` rows."""
    n = len(dataset)
    if size < 1 or (not replacement and size > n):
        raise ConfigError(f"batch size {size} out of range for a dataset of {n} samples")
    return Batch(dataset, rng.choice(n, size, replace=replacement))


def subsample(rng: SeededRng, batch: Batch, size: int) -> Batch:
    """Uniform draw of ``size`` distinct rows out of an existing batch."""
    if size < 1 or size > len(batch):
        raise ConfigError(f"cannot draw {size} samples from a batch of {len(batch)}")
    pick = rng.choice(len(batch), size, replace=False)
    return Batch(batch.dataset, batch.indices[pick])


# --- CSV ---------------------------------------------------------------------


def save_dataset_csv(path, dataset: Dataset) -> None:
    n, m = dataset.x.shape[1], dataset.y.shape[1]
    header = [f"x{i}" for i in range(n)] + [f"y{j}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for xi, yi in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


def load_dataset_csv(path, name: str | None = None) -> Dataset:
    """Read a ``x0,...,xn,y0,...,ym`` CSV.

    A file without any ``y`` columns is treated as auto-associative (y = x).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty dataset file") from None
        rows = [[float(v) for v in row] for row in reader if row]
    xcols = [i for i, h in enumerate(header) if h.strip().startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.strip().startswith("y")]
    if not xcols or len(xcols) + len(ycols) != len(header):
        raise ConfigError(f"{path}: header must be x0..xn followed by y0..ym")
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ConfigError(f"{path}: ragged rows")
    x = data[:, xcols]
    y = data[:, ycols] if ycols else x.copy()
    return Dataset(x, y, name or Path(path).stem)


# --- synthetic data ------------------------------------------------------------


def gaussian_mixture(
    rng: SeededRng,
    n_samples: int,
    dim: int,
    n_components: int = 4,
    latent_dim: int = 3,
    noise: float = 0.05,
    name: str = "gaussian-mixture",
) -> Dataset:
    """Auto-association data: clusters living near a random ``latent_dim`` plane.

    Each component has a mean and a low-rank covariance inside a shared
    random subspace plus isotropic ``noise``; rows are scaled to keep
    entries O(1) so tanh units are not saturated at w = 0.
    """
    basis, _ = np.linalg.qr(rng.normal((dim, latent_dim)))
    centers = 2.0 * rng.normal((n_components, latent_dim))
    labels = rng.integers(0, n_components, size=n_samples)
    latent = centers[labels] + 0.5 * rng.normal((n_samples, latent_dim))
    x = latent @ basis.T + noise * rng.normal((n_samples, dim))
    x = x / np.max(np.abs(x))
    return Dataset(x, x.copy(), name)


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, w, widths, activation: str, seed: int) -> None:
    """Weights as a one-column CSV plus a ``.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("w\n")
        for v in np.asarray(w, dtype=float):
            fh.write(f"{float(v):.17g}\n")
    meta = {"layer_widths": [int(n) for n in widths], "activation": activation, "seed": int(seed), "dim": int(len(w))}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    path = Path(path)
    values = path.read_text().split()
    if not values or values[0] != "w":
        raise ConfigError(f"{path}: not a checkpoint file")
    w = np.array([float(v) for v in values[1:]])
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("dim", w.size) != w.size:
        raise ConfigError(f"{path}: sidecar dim {meta['dim']} != {w.size} weights")
    return w, meta
