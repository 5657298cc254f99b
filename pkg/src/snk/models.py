"""Differentiable problems with sweep metering.

Every model evaluates the Tikhonov-regularized empirical risk

    F(w; batch) = mean_i F_i(w) + (gamma / 2) |w|^2

and its derivatives on a :class:`~snk.data.Batch`. Work is charged to the
model's :class:`SweepLedger` in per-sample forward/backward evaluations:

* ``loss``      : N forward
* ``gradient``  : N forward + N backward (one sweep per sample)
* ``hvp``       : 2N forward + 2N backward per direction (the gradient sweep
  plus the extra forward/backward pass of the R-operator)

``evaluate``/``evaluate_gradient`` are unmetered and exist for telemetry
(test-set losses and similar) that must not count against a sweep budget.
"""

from __future__ import annotations

import copy
import threading
from dataclasses import dataclass

import numpy as np

from .data import Batch, Dataset
from .errors import ConfigError, DimensionError, NonFiniteLossError
from .numerics import SeededRng

__all__ = [
    "SweepLedger",
    "DifferentiableModel",
    "QuadraticProblem",
    "ScalarFieldModel",
    "FeedforwardAutoencoder",
    "ACTIVATIONS",
    "make_saddle_problem",
]


class SweepLedger:
    """Thread-safe counters of per-sample forward and backward evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward_count = 0
        self.backward_count = 0

    def charge(self, forward: int, backward: int = 0) -> None:
        with self._lock:
            self.forward_count += int(forward)
            self.backward_count += int(backward)

    @property
    def sweeps(self) -> float:
        return (self.forward_count + self.backward_count) / 2.0

    def snapshot(self):
        with self._lock:
            return self.forward_count, self.backward_count

    def __repr__(self):
        return f"SweepLedger(forward={self.forward_count}, backward={self.backward_count}, sweeps={self.sweeps})"


class DifferentiableModel:
    """Base class: subclasses implement the unregularized batch-mean hooks.

    Hooks receive the batch rows ``x`` (N x n) and ``y`` (N x m):

    ``_loss(w, x, y)``, ``_loss_grad(w, x, y)``, ``_hvp(w, x, y, V)`` with
    ``V`` of shape (d, k), and ``_per_sample_grads(w, x, y)`` returning (N, d).
    """

    name = "model"

    def __init__(self, dim: int, gamma: float = 0.0):
        if dim < 1:
            raise DimensionError("model dimension must be positive")
        if gamma < 0:
            raise ConfigError("Tikhonov parameter gamma must be >= 0")
        self.dim = int(dim)
        self.gamma = float(gamma)
        self.ledger = SweepLedger()

    # -- hooks -----------------------------------------------------------------
    def _loss(self, w, x, y) -> float:
        raise NotImplementedError

    def _loss_grad(self, w, x, y):
        raise NotImplementedError

    def _hvp(self, w, x, y, V):
        raise NotImplementedError

    def _per_sample_grads(self, w, x, y):
        raise NotImplementedError

    # -- helpers -----------------------------------------------------------------
    def clone(self, gamma: float | None = None) -> "DifferentiableModel":
        """Shallow copy with a fresh ledger (and optionally another gamma)."""
        other = copy.copy(self)
        other.ledger = SweepLedger()
        if gamma is not None:
            if gamma < 0:
                raise ConfigError("gamma must be >= 0")
            other.gamma = float(gamma)
        return other

    def _check_w(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise DimensionError(f"expected w of length {self.dim}, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteLossError("non-finite parameters", float(np.linalg.norm(np.nan_to_num(w))))
        return w

    def _finite(self, value, w):
        if not np.all(np.isfinite(value)):
            raise NonFiniteLossError(f"{self.name}: non-finite loss or derivative", float(np.linalg.norm(w)))
        return value

    def _reg(self, tikhonov: bool) -> float:
        return self.gamma if tikhonov else 0.0

    # -- metered API -------------------------------------------------------------
    def loss(self, w, batch: Batch, tikhonov: bool = True) -> float:
        w = self._check_w(w)
        self.ledger.charge(len(batch))
        return self._value(w, batch, tikhonov)

    def gradient(self, w, batch: Batch, tikhonov: bool = True) -> np.ndarray:
        return self.loss_and_gradient(w, batch, tikhonov)[1]

    def loss_and_gradient(self, w, batch: Batch, tikhonov: bool = True):
        w = self._check_w(w)
        n = len(batch)
        self.ledger.charge(n, n)
        return self._value_grad(w, batch, tikhonov)

    def hvp(self, w, batch: Batch, v, tikhonov: bool = True) -> np.ndarray:
        """Hessian-vector product; ``v`` may be a vector or a (d, k) block."""
        w = self._check_w(w)
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        V = v[:, None] if single else v
        if V.ndim != 2 or V.shape[0] != self.dim:
            raise DimensionError(f"hvp direction has shape {v.shape}, model dim is {self.dim}")
        n = len(batch)
        k = V.shape[1]
        self.ledger.charge(2 * n * k, 2 * n * k)
        with np.errstate(over="ignore", invalid="ignore"):
            HV = self._hvp(w, batch.x, batch.y, V)
            gam = self._reg(tikhonov)
            if gam:
                HV = HV + gam * V
        self._finite(HV, w)
        return HV[:, 0] if single else HV

    def per_sample_gradients(self, w, batch: Batch) -> np.ndarray:
        """Unregularized gradients of each F_i, one row per sample (metered)."""
        w = self._check_w(w)
        n = len(batch)
        self.ledger.charge(n, n)
        with np.errstate(over="ignore", invalid="ignore"):
            G = self._per_sample_grads(w, batch.x, batch.y)
        return self._finite(G, w)

    # -- unmetered ---------------------------------------------------------------
    def evaluate(self, w, batch: Batch, tikhonov: bool = True) -> float:
        return self._value(self._check_w(w), batch, tikhonov)

    def evaluate_gradient(self, w, batch: Batch, tikhonov: bool = True) -> np.ndarray:
        return self._value_grad(self._check_w(w), batch, tikhonov)[1]

    def _value(self, w, batch, tikhonov):
        # overflow surfaces as NonFiniteLossError rather than a warning
        with np.errstate(over="ignore", invalid="ignore"):
            val = self._loss(w, batch.x, batch.y)
            gam = self._reg(tikhonov)
            if gam:
                val = val + 0.5 * gam * float(w @ w)
        return float(self._finite(val, w))

    def _value_grad(self, w, batch, tikhonov):
        with np.errstate(over="ignore", invalid="ignore"):
            val, g = self._loss_grad(w, batch.x, batch.y)
            gam = self._reg(tikhonov)
            if gam:
                val = val + 0.5 * gam * float(w @ w)
                g = g + gam * w
        self._finite(val, w)
        self._finite(g, w)
        return float(val), g


# --- quadratics ------------------------------------------------------------------


class QuadraticProblem(DifferentiableModel):
    """Sampled quadratic with a prescribed mean-Hessian spectrum.

    Component i is ``F_i(w) = 1/2 e^T A_i e + b_i^T e`` with ``e = w - w_star``,
    ``A_i = A_bar + sigma_h (G_i + G_i^T)/2`` and ``b_i = grad_noise * z_i``.
    Both perturbations are mean-corrected per split, so each split's mean
    Hessian is exactly ``A_bar = basis diag(spectrum) basis^T`` and the mean of
    ``b_i`` is zero. The Hessian is constant in w (Lipschitz constant 0).

    A sample's features are ``[vec(A_i), b_i]``; the target is empty.
    """

    name = "quadratic"

    def __init__(
        self,
        spectrum,
        *,
        basis=None,
        sigma_h: float = 0.0,
        grad_noise: float = 0.0,
        w_star=None,
        n_train: int = 1,
        n_test: int = 1,
        gamma: float = 0.0,
        seed: int = 0,
    ):
        spectrum = np.asarray(spectrum, dtype=float)
        d = spectrum.size
        super().__init__(d, gamma)
        rng = SeededRng(seed)
        if basis is None:
            basis = np.linalg.qr(rng.normal((d, d)))[0] if d > 1 else np.ones((1, 1))
        basis = np.asarray(basis, dtype=float)
        if basis.shape != (d, d) or np.max(np.abs(basis.T @ basis - np.eye(d))) > 1e-10:
            raise ConfigError("basis must be a d x d orthonormal matrix")
        self.spectrum = spectrum
        self.basis = basis
        self.sigma_h = float(sigma_h)
        self.grad_noise = float(grad_noise)
        self.w_star = np.zeros(d) if w_star is None else np.asarray(w_star, dtype=float).copy()
        if self.w_star.shape != (d,):
            raise DimensionError("w_star has the wrong length")
        A_bar = (basis * spectrum) @ basis.T
        self.mean_hessian = 0.5 * (A_bar + A_bar.T)
        self.train = self._make_split(rng, int(n_train), "quadratic-train")
        self.test = self._make_split(rng, int(n_test), "quadratic-test")

    def _make_split(self, rng, n, name):
        d = self.dim
        if n < 1:
            raise ConfigError("quadratic splits need at least one sample")
        A = np.broadcast_to(self.mean_hessian, (n, d, d)).copy()
        if self.sigma_h > 0:
            G = rng.normal((n, d, d))
            P = 0.5 * (G + G.transpose(0, 2, 1))
            P -= P.mean(axis=0)
            A += self.sigma_h * P
            A = 0.5 * (A + A.transpose(0, 2, 1))
            A += self.mean_hessian - A.mean(axis=0)
        b = np.zeros((n, d))
        if self.grad_noise > 0:
            b = self.grad_noise * rng.normal((n, d))
            b -= b.mean(axis=0)
        x = np.concatenate([A.reshape(n, d * d), b], axis=1)
        return Dataset(x, np.zeros((n, 0)), name)

    def _unpack(self, x):
        d = self.dim
        return x[:, : d * d].reshape(-1, d, d), x[:, d * d :]

    def _loss(self, w, x, y):
        A, b = self._unpack(x)
        e = w - self.w_star
        Ae = A @ e
        return float(np.mean(0.5 * (Ae @ e) + b @ e))

    def _loss_grad(self, w, x, y):
        A, b = self._unpack(x)
        e = w - self.w_star
        Ae = A @ e
        val = float(np.mean(0.5 * (Ae @ e) + b @ e))
        return val, Ae.mean(axis=0) + b.mean(axis=0)

    def _hvp(self, w, x, y, V):
        A, _ = self._unpack(x)
        return A.mean(axis=0) @ V

    def _per_sample_grads(self, w, x, y):
        A, b = self._unpack(x)
        return A @ (w - self.w_star) + b

    def batch_hessian(self, batch: Batch, tikhonov: bool = True) -> np.ndarray:
        """Dense Hessian of a batch (fixtures and oracles only; unmetered)."""
        A, _ = self._unpack(batch.x)
        return A.mean(axis=0) + self._reg(tikhonov) * np.eye(self.dim)


class ScalarFieldModel(DifferentiableModel):
    """A data-free objective F(w) given by callables.

    Every sample in a batch carries the same component, so batch means equal
    F itself; the batch size still drives sweep metering. ``dataset`` is a
    one-row placeholder for drawing batches.
    """

    def __init__(self, dim, f, grad, hess, gamma: float = 0.0, name: str = "scalar-field"):
        super().__init__(dim, gamma)
        self._f, self._g, self._h = f, grad, hess
        self.name = name
        self.dataset = Dataset(np.zeros((1, 1)), np.zeros((1, 0)), name)
        self.train = self.test = self.dataset

    def _loss(self, w, x, y):
        return float(self._f(w))

    def _loss_grad(self, w, x, y):
        return float(self._f(w)), np.asarray(self._g(w), dtype=float)

    def _hvp(self, w, x, y, V):
        return np.asarray(self._h(w), dtype=float) @ V

    def _per_sample_grads(self, w, x, y):
        return np.tile(np.asarray(self._g(w), dtype=float), (x.shape[0], 1))


def make_saddle_problem(kind: str, spectrum=(1.0, -1.0), gamma: float = 0.0) -> DifferentiableModel:
    """Fixtures with a known stationary point at the origin.

    ``indefinite-quadratic``: F(w) = 1/2 w^T diag(spectrum) w.
    ``cubic-monkey-saddle``: F(w) = w1^3 - 3 w1 w2^2 (degenerate saddle, zero Hessian at 0).
    """
    if kind == "indefinite-quadratic":
        spectrum = np.asarray(spectrum, dtype=float)
        return QuadraticProblem(spectrum, basis=np.eye(spectrum.size), gamma=gamma)
    if kind == "cubic-monkey-saddle":
        return ScalarFieldModel(
            2,
            lambda w: w[0] ** 3 - 3.0 * w[0] * w[1] ** 2,
            lambda w: np.array([3.0 * w[0] ** 2 - 3.0 * w[1] ** 2, -6.0 * w[0] * w[1]]),
            lambda w: np.array([[6.0 * w[0], -6.0 * w[1]], [-6.0 * w[1], -6.0 * w[0]]]),
            gamma=gamma,
            name="cubic-monkey-saddle",
        )
    raise ConfigError(f"unknown saddle problem {kind!r}")


# --- autoencoder -----------------------------------------------------------------


def _tanh(z):
    t = np.tanh(z)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _softplus(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic, overflow-free
    return np.logaddexp(0.0, z), s, s * (1.0 - s)


def _sigmoid(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    ds = s * (1.0 - s)
    return s, ds, ds * (1.0 - 2.0 * s)


def _identity(z):
    return z, np.ones_like(z), np.zeros_like(z)


#: name -> callable returning (f(z), f'(z), f''(z))
ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus, "sigmoid": _sigmoid, "identity": _identity}


@dataclass(frozen=True)
class _Layer:
    w_slice: slice
    b_slice: slice
    n_in: int
    n_out: int


class FeedforwardAutoencoder(DifferentiableModel):
    """Dense network with squared reconstruction loss 1/2 |net(x) - y|^2.

    Parameter layout is layer-major; within a layer the (out x in) weight
    matrix comes first in row-major order, then the bias. Hidden layers use
    ``activation``; the last layer uses ``output_activation``.
    Hessian-vector products use Pearlmutter's R-operator (one extra forward
    and backward pass), vectorized over a block of directions.
    """

    name = "autoencoder"

    def __init__(self, widths, activation: str = "tanh", output_activation: str = "identity", gamma: float = 0.0):
        widths = [int(n) for n in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError("need at least an input and an output layer width")
        for a in (activation, output_activation):
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}; choose from {sorted(ACTIVATIONS)}")
        layers, off = [], 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            ws = slice(off, off + n_in * n_out)
            off += n_in * n_out
            bs = slice(off, off + n_out)
            off += n_out
            layers.append(_Layer(ws, bs, n_in, n_out))
        super().__init__(off, gamma)
        self.widths = widths
        self.activation = activation
        self.output_activation = output_activation
        self._layers = layers
        self._acts = [ACTIVATIONS[activation]] * (len(layers) - 1) + [ACTIVATIONS[output_activation]]

    def unpack(self, w):
        """List of (W, b) views into ``w``; W has shape (out, in)."""
        return [(w[L.w_slice].reshape(L.n_out, L.n_in), w[L.b_slice]) for L in self._layers]

    def forward(self, w, x):
        a = x
        for (W, b), act in zip(self.unpack(w), self._acts):
            a = act(a @ W.T + b)[0]
        return a

    def _forward_cache(self, w, x):
        params = self.unpack(w)
        A, Z, D1, D2 = [x], [], [], []
        for (W, b), act in zip(params, self._acts):
            z = A[-1] @ W.T + b
            f, df, d2f = act(z)
            Z.append(z)
            D1.append(df)
            D2.append(d2f)
            A.append(f)
        return params, A, D1, D2

    def _loss(self, w, x, y):
        r = self.forward(w, x) - y
        return float(0.5 * np.mean(np.sum(r * r, axis=1)))

    def _backward(self, params, A, D1, y, scale):
        """Gradient blocks plus the per-layer dA and dZ signals."""
        dA = (A[-1] - y) * scale
        L = len(params)
        grads, dAs, dZs = [None] * L, [None] * L, [None] * L
        for l in range(L - 1, -1, -1):
            W, _ = params[l]
            dz = dA * D1[l]
            dAs[l], dZs[l] = dA, dz
            grads[l] = (dz.T @ A[l], dz.sum(axis=0))
            dA = dz @ W
        return grads, dAs, dZs

    def _flatten(self, blocks):
        g = np.empty(self.dim)
        for L, (gW, gb) in zip(self._layers, blocks):
            g[L.w_slice] = gW.ravel()
            g[L.b_slice] = gb
        return g

    def _loss_grad(self, w, x, y):
        params, A, D1, _ = self._forward_cache(w, x)
        r = A[-1] - y
        val = float(0.5 * np.mean(np.sum(r * r, axis=1)))
        grads, _, _ = self._backward(params, A, D1, y, 1.0 / x.shape[0])
        return val, self._flatten(grads)

    def _per_sample_grads(self, w, x, y):
        params, A, D1, _ = self._forward_cache(w, x)
        _, _, dZ = self._backward(params, A, D1, y, 1.0)
        out = np.empty((x.shape[0], self.dim))
        for L, dz, a in zip(self._layers, dZ, A[:-1]):
            out[:, L.w_slice] = np.einsum("no,ni->noi", dz, a).reshape(x.shape[0], -1)
            out[:, L.b_slice] = dz
        return out

    def _hvp(self, w, x, y, V):
        n = x.shape[0]
        k = V.shape[1]
        params, A, D1, D2 = self._forward_cache(w, x)
        _, dA, dZ = self._backward(params, A, D1, y, 1.0 / n)
        dirs = [(V[L.w_slice].T.reshape(k, L.n_out, L.n_in), V[L.b_slice].T[:, None, :]) for L in self._layers]
        # R-forward, batched over the k directions (leading axis)
        RA = [np.zeros((k,) + x.shape)]
        RZ = []
        for (W, _), (VW, vb), a, d1 in zip(params, dirs, A[:-1], D1):
            rz = RA[-1] @ W.T + a @ VW.transpose(0, 2, 1) + vb
            RZ.append(rz)
            RA.append(d1 * rz)
        # R-backward
        out = np.empty((self.dim, k))
        RdA = RA[-1] / n
        for l in range(len(params) - 1, -1, -1):
            W, _ = params[l]
            VW, _ = dirs[l]
            Lyr = self._layers[l]
            rdz = RdA * D1[l] + dA[l] * D2[l] * RZ[l]
            rgW = rdz.transpose(0, 2, 1) @ A[l] + dZ[l].T @ RA[l]
            out[Lyr.w_slice] = rgW.reshape(k, -1).T
            out[Lyr.b_slice] = rdz.sum(axis=1).T
            if l:
                RdA = rdz @ W + dZ[l] @ VW
        return out
