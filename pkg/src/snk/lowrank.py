"""Randomized low-rank Hessian factors and the Woodbury step.

The operator abstraction here is shared with :mod:`snk.krylov`: anything with
``dim`` and ``apply(V)`` (vector or d x k block) works, and plain numpy
matrices are wrapped by :func:`as_operator`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DegenerateSketchError, DimensionError, RegularizationError
from .numerics import SeededRng, gaussian_matrix, sym_eig, thin_qr

__all__ = [
    "LinearOperator",
    "MatrixOperator",
    "HessianOperator",
    "as_operator",
    "LowRankFactor",
    "randomized_eig",
    "smw_solve",
    "flip_spectrum",
    "min_eig_estimate",
    "spectrum_rows",
]

SINGULAR_TOL = 1e-12


class LinearOperator:
    """Symmetric linear map on R^d. Counts vectors applied in ``applications``."""

    dim: int

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.applications = 0

    def _apply_block(self, V: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        V = v[:, None] if single else v
        if V.ndim != 2 or V.shape[0] != self.dim:
            raise DimensionError(f"operator of dim {self.dim} applied to shape {v.shape}")
        self.applications += V.shape[1]
        out = self._apply_block(V)
        return out[:, 0] if single else out

    __call__ = apply

    def __matmul__(self, v):
        return self.apply(v)


class MatrixOperator(LinearOperator):
    """Explicit dense matrix plus an optional shift: ``v -> (A + shift I) v``."""

    def __init__(self, A, shift: float = 0.0):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError("MatrixOperator needs a square matrix")
        super().__init__(A.shape[0])
        self.matrix = A
        self.shift = float(shift)

    def _apply_block(self, V):
        out = self.matrix @ V
        return out + self.shift * V if self.shift else out


class HessianOperator(LinearOperator):
    """Hessian of a model at a fixed (w, batch), applied through metered hvps.

    ``tikhonov=False`` gives the data Hessian only; ``shift`` is added on top
    (the Krylov solvers use the regularized Hessian, i.e. ``tikhonov=True``).
    """

    def __init__(self, model, w, batch, tikhonov: bool = False, shift: float = 0.0):
        super().__init__(model.dim)
        self.model = model
        self.w = np.array(w, dtype=float)
        self.batch = batch
        self.tikhonov = tikhonov
        self.shift = float(shift)

    def _apply_block(self, V):
        out = self.model.hvp(self.w, self.batch, V, tikhonov=self.tikhonov)
        return out + self.shift * V if self.shift else out


def as_operator(op) -> LinearOperator:
    if isinstance(op, LinearOperator):
        return op
    return MatrixOperator(op)


@dataclass(frozen=True, eq=False)
class LowRankFactor:
    """Truncated eigendecomposition ``U diag(lambdas) U^T``.

    ``discarded`` holds the eigenvalues of the projected problem that were
    cut by truncation (a cheap decay diagnostic).
    """

    U: np.ndarray
    lambdas: np.ndarray
    p: int = 0
    discarded: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        lam = np.asarray(self.lambdas, dtype=float).ravel()
        if U.ndim != 2 or U.shape[1] != lam.size:
            raise DimensionError(f"U has shape {U.shape} but there are {lam.size} eigenvalues")
        if np.any(np.diff(np.abs(lam)) > 0):
            raise ConfigError("eigenvalues must be ordered by descending magnitude")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "discarded", np.asarray(self.discarded, dtype=float).ravel())

    @property
    def r(self) -> int:
        return self.lambdas.size

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    def dense(self) -> np.ndarray:
        return (self.U * self.lambdas) @ self.U.T


def randomized_eig(op, r: int, p: int, rng: SeededRng, power_iters: int = 0) -> LowRankFactor:
    """Double-pass randomized eigendecomposition with ``r + p`` sketch columns.

    Applies the operator to r + p vectors twice (sketch, then projection).
    ``power_iters`` extra rounds of subspace iteration sharpen the basis when
    the spectrum decays slowly, at ``r + p`` applications each.
    A sketch whose numerical rank is below r + p is accepted: Householder QR
    still yields an orthonormal basis containing the range, which is what
    makes exact-rank operators reconstructible. Only a non-finite sketch is
    rejected.
    """
    op = as_operator(op)
    d = op.dim
    if r < 1 or p < 0 or r + p > d or (p < 2 and r + p < d):
        raise ConfigError(
            f"need r >= 1, r + p <= d and p >= 2 unless the sketch spans R^d (got r={r}, p={p}, d={d})"
        )
    if power_iters < 0:
        raise ConfigError("power_iters must be >= 0")
    omega = gaussian_matrix(rng, d, r + p)
    Y = op.apply(omega)
    for i in range(power_iters + 1):
        if not np.all(np.isfinite(Y)):
            raise DegenerateSketchError("Hessian sketch is not finite; try a smaller step or larger p")
        Q = thin_qr(Y, check_rank=False)
        if i < power_iters:
            Y = op.apply(Q)
    T = Q.T @ op.apply(Q)
    T = 0.5 * (T + T.T)
    lam, V = sym_eig(T)
    U = Q @ V[:, :r]
    return LowRankFactor(U, lam[:r], p=p, discarded=lam[r:])


def smw_solve(factor: LowRankFactor, gamma: float, g, flip: bool = True) -> np.ndarray:
    """Solve ``(U L U^T + gamma I) p = -g`` via the Woodbury identity.

    ``L`` is ``|lambdas|`` when ``flip`` else ``lambdas``. Uses the
    algebraically equivalent form
    ``p = -(g - U U^T g)/gamma - U diag(1/(L + gamma)) U^T g``.
    ``gamma = 0`` is allowed only for a full-rank factor (r = d), where the
    first term vanishes and the result is the exact Newton step.
    """
    full = factor.r == factor.dim
    if not (gamma > 0 or (gamma == 0 and full)):
        raise ConfigError("smw_solve requires gamma > 0 (or gamma = 0 with a full-rank factor)")
    g = np.asarray(g, dtype=float)
    if g.shape != (factor.dim,):
        raise DimensionError(f"gradient has shape {g.shape}, factor dim is {factor.dim}")
    lam = np.abs(factor.lambdas) if flip else factor.lambdas
    denom = lam + gamma
    bad = np.abs(denom) < SINGULAR_TOL * np.maximum(1.0, np.abs(lam))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise RegularizationError(
            f"gamma={gamma:g} cancels eigenvalue {lam[i]:.6g} (index {i}); the shifted system is singular",
            float(lam[i]),
        )
    U = factor.U
    c = U.T @ g
    step = -U @ (c / denom)
    if not full:
        step -= (g - U @ c) / gamma
    return step


def flip_spectrum(factor: LowRankFactor) -> LowRankFactor:
    return replace(factor, lambdas=np.abs(factor.lambdas))


def min_eig_estimate(factor: LowRankFactor, op=None) -> float:
    """Smallest retained eigenvalue.

    Only certifies curvature inside span(U); directions outside the retained
    subspace are not examined. ``op`` is accepted for interface symmetry and
    not applied (zero extra cost).
    """
    if factor.r == 0:
        return float("inf")
    return float(np.min(factor.lambdas))


def spectrum_rows(iteration: int, factor: LowRankFactor):
    """``(iteration, rank_index, eigenvalue)`` tuples for the spectrum CSV."""
    return [(int(iteration), i, float(v)) for i, v in enumerate(factor.lambdas)]
