"""Dense linear-algebra kernels and the seeded random stream.

Everything here works on float64 numpy arrays. ``sym_eig`` is meant for the
small projected matrices produced by the randomized eigensolver (a few dozen
rows); it is never applied to d x d Hessians.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateSketchError, DimensionError, NumericalError

__all__ = [
    "SeededRng",
    "dot",
    "thin_qr",
    "sym_eig",
    "gaussian_matrix",
    "magnitude_order",
]

QR_RANK_TOL = 1e-14
SYMMETRY_TOL = 1e-12


class SeededRng:
    """Reproducible random stream.

    Backed by numpy's PCG64 bit generator, whose output for a given seed is
    fixed across platforms and numpy versions; normals come from numpy's
    ziggurat transform. A single instance must not be shared between threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream, deterministic in (seed, key)."""
        return SeededRng(int(np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0]))


def dot(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    return float(a @ b)


def thin_qr(A, check_rank: bool = True) -> np.ndarray:
    """Orthonormal basis Q (d x k) for the columns of ``A``.

    Householder QR via LAPACK, with column signs fixed so that diag(R) >= 0,
    which makes the output a deterministic function of ``A``.

    Raises
    ------
    DegenerateSketchError
        If ``check_rank`` and some |R_jj| falls below 1e-14 times the largest
        column norm of ``A``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionError("thin_qr expects a matrix")
    d, k = A.shape
    if k > d:
        raise DimensionError(f"thin_qr needs k <= d, got {d}x{k}")
    if not np.all(np.isfinite(A)):
        raise DegenerateSketchError("sketch contains non-finite entries")
    Q, R = np.linalg.qr(A, mode="reduced")
    diag = np.diag(R)
    signs = np.where(diag < 0, -1.0, 1.0)
    Q = Q * signs
    if check_rank:
        scale = np.max(np.linalg.norm(A, axis=0)) if k else 0.0
        small = np.abs(diag) < QR_RANK_TOL * max(scale, np.finfo(float).tiny)
        if scale == 0.0 or np.any(small):
            j = int(np.argmax(small)) if scale else 0
            raise DegenerateSketchError(
                f"rank-deficient sketch: column {j} has |R_jj|={abs(diag[j]):.2e}; "
                "increase the oversampling p"
            )
    return Q


def magnitude_order(values) -> np.ndarray:
    """Indices sorting ``values`` by descending |value|.

    Ties in magnitude put the positive value first, then fall back to the
    original index.
    """
    values = np.asarray(values, dtype=float)
    idx = np.arange(values.size)
    # lexsort: last key is primary
    return np.lexsort((idx, values < 0, -np.abs(values)))


def sym_eig(A):
    """Eigendecomposition of a small symmetric matrix.

    Returns ``(lam, V)`` with eigenvalues in descending magnitude (see
    :func:`magnitude_order`) and orthonormal eigenvectors as columns of ``V``.
    The factorization itself is LAPACK's ``syevd`` via numpy.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"sym_eig expects a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError("sym_eig input has non-finite entries")
    n = A.shape[0]
    amax = np.max(np.abs(A)) if n else 0.0
    asym = np.max(np.abs(A - A.T)) if n else 0.0
    if asym > SYMMETRY_TOL * amax:
        raise ContractError(f"sym_eig input is not symmetric (max |A-A^T| = {asym:.3e})")
    try:
        lam, V = np.linalg.eigh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"symmetric eigensolver failed for n={n}: {exc}") from exc
    order = magnitude_order(lam)
    return lam[order], V[:, order]


def gaussian_matrix(rng: SeededRng, d: int, k: int) -> np.ndarray:
    if d < 1 or k < 1:
        raise DimensionError("gaussian_matrix needs d, k >= 1")
    return rng.normal((d, k))
