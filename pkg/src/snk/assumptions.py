"""Empirical estimates of the smoothness and variance constants of a problem.

All estimates use unmetered-style direct evaluation on the supplied dataset;
they are diagnostics and are charged to a throwaway clone of the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch, Dataset
from .errors import ConfigError
from .lowrank import HessianOperator, LinearOperator, randomized_eig
from .numerics import SeededRng

__all__ = ["AssumptionConstants", "estimate_assumption_constants", "dense_hessian", "top_eigenvalue"]

DENSE_LIMIT = 200


@dataclass(frozen=True)
class AssumptionConstants:
    L: float  # largest |eigenvalue| of the (model-regularized) Hessian over probes
    v: float  # sqrt of the largest trace of the per-sample gradient covariance
    sigma: float  # sqrt of |E[(H_i - H)^2]|, largest over probes
    M: float  # Hessian Lipschitz estimate from probe pairs
    n_probes: int
    n_samples: int
    n_pairs: int


def dense_hessian(model, w, batch: Batch, tikhonov: bool = True) -> np.ndarray:
    """Materialize the Hessian column by column through hvps."""
    H = model.hvp(w, batch, np.eye(model.dim), tikhonov=tikhonov)
    return 0.5 * (H + H.T)


def top_eigenvalue(op: LinearOperator, rng: SeededRng) -> float:
    """Largest |eigenvalue| of a symmetric operator: dense when small, sketched otherwise."""
    d = op.dim
    if d <= DENSE_LIMIT:
        H = op.apply(np.eye(d))
        return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (H + H.T)))))
    r = min(5, d - 2)
    return float(abs(randomized_eig(op, r, min(10, d - r), rng).lambdas[0]))


class _HessianVarianceOperator(LinearOperator):
    """v -> mean_i (H_i - H)^2 v over the samples of a batch."""

    def __init__(self, model, w, batch: Batch):
        super().__init__(model.dim)
        self.model, self.w, self.batch = model, w, batch
        self.singletons = [Batch(batch.dataset, [i]) for i in batch.indices]

    def _apply_block(self, V):
        m, w = self.model, self.w
        mean_hv = m.hvp(w, self.batch, V, tikhonov=False)
        acc = np.zeros_like(V)
        for s in self.singletons:
            D = m.hvp(w, s, V, tikhonov=False) - mean_hv
            acc += m.hvp(w, s, D, tikhonov=False) - m.hvp(w, self.batch, D, tikhonov=False)
        return acc / len(self.singletons)


def estimate_assumption_constants(
    model,
    dataset: Dataset,
    probe_points,
    rng: SeededRng,
    max_components: int | None = 500,
) -> AssumptionConstants:
    """Estimate L, v, sigma and M from evaluations at ``probe_points``.

    ``max_components`` caps how many samples enter the Hessian-variance
    estimate (the full dataset is used for L and v).
    """
    probes = [np.asarray(p, dtype=float) for p in probe_points]
    if len(probes) < 2:
        raise ConfigError("at least two probe points are needed to estimate the Hessian Lipschitz constant")
    model = model.clone()
    full = dataset.all()
    comp = full
    if max_components is not None and len(dataset) > max_components:
        comp = Batch(dataset, rng.choice(len(dataset), max_components, replace=False))

    L = v2 = s2 = 0.0
    for w in probes:
        L = max(L, top_eigenvalue(HessianOperator(model, w, full, tikhonov=True), rng))
        G = model.per_sample_gradients(w, full)
        v2 = max(v2, float(np.sum(np.var(G, axis=0))))
        s2 = max(s2, top_eigenvalue(_HessianVarianceOperator(model, w, comp), rng))

    M = 0.0
    pairs = 0
    dense = model.dim <= DENSE_LIMIT
    hess = [dense_hessian(model, w, full, tikhonov=False) for w in probes] if dense else None
    for i in range(len(probes)):
        for j in range(i + 1, len(probes)):
            gap = float(np.linalg.norm(probes[i] - probes[j]))
            if gap == 0.0:
                continue
            if dense:
                diff = float(np.max(np.abs(np.linalg.eigvalsh(hess[i] - hess[j]))))
            else:
                diff = top_eigenvalue(_DifferenceOperator(model, probes[i], probes[j], full), rng)
            M = max(M, diff / gap)
            pairs += 1
    return AssumptionConstants(L, float(np.sqrt(v2)), float(np.sqrt(max(s2, 0.0))), M, len(probes), len(dataset), pairs)


class _DifferenceOperator(LinearOperator):
    def __init__(self, model, w, z, batch):
        super().__init__(model.dim)
        self.model, self.w, self.z, self.batch = model, w, z, batch

    def _apply_block(self, V):
        m = self.model
        return m.hvp(self.w, self.batch, V, tikhonov=False) - m.hvp(self.z, self.batch, V, tikhonov=False)
