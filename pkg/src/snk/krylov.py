"""Matrix-free CG, MINRES and GMRES for Newton systems.

All solvers start from p0 = 0 and solve ``A p = b``; the Newton caller passes
``b = -g``. ``iterations`` counts operator applications. Besides the usual
tolerance / iteration-cap exits, a solver stops early when it meets a
direction of negative curvature and hands back the iterate it had so far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .lowrank import as_operator
from .numerics import SeededRng

__all__ = [
    "ForcingSchedule",
    "forcing_eta",
    "KrylovOutcome",
    "cg_solve",
    "minres_solve",
    "gmres_solve",
    "SOLVERS",
    "PolynomialCheckReport",
    "krylov_polynomial_check",
    "CURVATURE_TOL",
]

CURVATURE_TOL = 1e-12
REORTH_TOL = 1e-8
TERMINATIONS = ("tolerance", "max_iterations", "negative_curvature", "breakdown")


@dataclass(frozen=True)
class ForcingSchedule:
    mode: str = "gradient-norm"
    eta_max: float = 0.5
    eta_const: float = 0.1

    def __post_init__(self):
        if self.mode not in ("gradient-norm", "constant"):
            raise ConfigError(f"unknown forcing mode {self.mode!r}")
        if not 0.0 < self.eta_max < 1.0:
            raise ConfigError("eta_max must lie in (0, 1)")
        if self.mode == "constant" and not 0.0 < self.eta_const <= self.eta_max:
            raise ConfigError("eta_const must lie in (0, eta_max]")


def forcing_eta(schedule: ForcingSchedule, grad_norm: float) -> float:
    if grad_norm < 0:
        raise ConfigError("gradient norm cannot be negative")
    if schedule.mode == "constant":
        return schedule.eta_const
    return min(schedule.eta_max, float(grad_norm))


@dataclass(frozen=True, eq=False)
class KrylovOutcome:
    step: np.ndarray
    residual_norm: float
    iterations: int
    termination: str
    min_rayleigh: float = math.inf
    residual_history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination == "tolerance"


def _prepare(op, b, max_iter):
    op = as_operator(op)
    b = np.asarray(b, dtype=float)
    if b.shape != (op.dim,):
        raise DimensionError(f"right-hand side has shape {b.shape}, operator dim is {op.dim}")
    if max_iter is None:
        max_iter = min(op.dim, 100)
    if max_iter < 0:
        raise ConfigError("max_iter must be >= 0")
    return op, b, int(max_iter)


def _curvature_fallback(b, bnorm2, bAb, Ab):
    """Clamped steepest-descent step used when curvature fails at step one."""
    scale = 1.0 if bAb == 0.0 else min(1.0, bnorm2 / abs(bAb))
    step = scale * b
    return step, float(np.linalg.norm(b - scale * Ab))


def _zero_outcome(b):
    return KrylovOutcome(np.zeros_like(b), 0.0, 0, "tolerance")


def cg_solve(op, b, eta: float, max_iter: int | None = None) -> KrylovOutcome:
    op, b, max_iter = _prepare(op, b, max_iter)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return _zero_outcome(b)
    tol = eta * bnorm
    p = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rr = bnorm * bnorm
    rnorm = bnorm
    history = []
    min_ray = math.inf
    its = 0
    termination = "max_iterations"
    for m in range(max_iter):
        Ad = op.apply(d)
        its += 1
        dd = float(d @ d)
        dAd = float(d @ Ad)
        if not (math.isfinite(dAd) and np.all(np.isfinite(Ad))):
            termination = "breakdown"
            break
        min_ray = min(min_ray, dAd / dd)
        if dAd <= CURVATURE_TOL * dd:
            termination = "negative_curvature"
            if m == 0:
                p, rnorm = _curvature_fallback(b, rr, dAd, Ad)
                history.append(rnorm)
            break
        a = rr / dAd
        p = p + a * d
        r = r - a * Ad
        rr_new = float(r @ r)
        rnorm = math.sqrt(rr_new)
        history.append(rnorm)
        if rnorm <= tol or rr_new == 0.0:
            termination = "tolerance"
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    return KrylovOutcome(p, rnorm, its, termination, min_ray, history)


def minres_solve(op, b, eta: float, max_iter: int | None = None) -> KrylovOutcome:
    """Paige-Saunders MINRES on the Lanczos tridiagonalization."""
    op, b, max_iter = _prepare(op, b, max_iter)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return _zero_outcome(b)
    tol = eta * bnorm
    eps = np.finfo(float).eps
    x = np.zeros_like(b)
    v = b / bnorm
    v_old = np.zeros_like(b)
    beta = 0.0
    w = np.zeros_like(b)
    w2 = np.zeros_like(b)
    cs, sn = -1.0, 0.0
    dbar = epsln = 0.0
    phibar = bnorm
    history = []
    min_ray = math.inf
    its = 0
    termination = "max_iterations"
    for k in range(max_iter):
        Av = op.apply(v)
        its += 1
        alpha = float(v @ Av)
        if not (math.isfinite(alpha) and np.all(np.isfinite(Av))):
            termination = "breakdown"
            break
        min_ray = min(min_ray, alpha)
        if alpha <= -CURVATURE_TOL:
            termination = "negative_curvature"
            if k == 0:
                x, phibar = _curvature_fallback(b, bnorm * bnorm, alpha * bnorm * bnorm, Av * bnorm)
                history.append(phibar)
            break
        u = Av - alpha * v - beta * v_old
        beta_new = float(np.linalg.norm(u))
        # apply the previous rotation, then build the new one
        oldeps = epsln
        delta = cs * dbar + sn * alpha
        gbar = sn * dbar - cs * alpha
        epsln = sn * beta_new
        dbar = -cs * beta_new
        gam = max(math.hypot(gbar, beta_new), eps)
        cs, sn = gbar / gam, beta_new / gam
        phi = cs * phibar
        phibar = sn * phibar
        w1, w2 = w2, w
        w = (v - oldeps * w1 - delta * w2) / gam
        x = x + phi * w
        history.append(abs(phibar))
        if abs(phibar) <= tol:
            termination = "tolerance"
            break
        if beta_new <= eps * max(abs(alpha), beta, 1.0) * 10:
            termination = "breakdown"
            break
        v_old, v, beta = v, u / beta_new, beta_new
    return KrylovOutcome(x, abs(phibar), its, termination, min_ray, history)


def gmres_solve(op, b, eta: float, max_iter: int | None = None) -> KrylovOutcome:
    """Unrestarted GMRES: Arnoldi with modified Gram-Schmidt and Givens QR."""
    op, b, max_iter = _prepare(op, b, max_iter)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return _zero_outcome(b)
    tol = eta * bnorm
    n = op.dim
    m_cap = max_iter
    V = np.zeros((n, m_cap + 1))
    R = np.zeros((m_cap + 1, m_cap))
    cs = np.zeros(m_cap)
    sn = np.zeros(m_cap)
    gvec = np.zeros(m_cap + 1)
    gvec[0] = bnorm
    V[:, 0] = b / bnorm
    history = []
    min_ray = math.inf
    its = 0
    k = 0  # columns in the current least-squares solution
    termination = "max_iterations"
    resid = bnorm
    fallback = None
    for j in range(m_cap):
        Aq = op.apply(V[:, j])
        its += 1
        if not np.all(np.isfinite(Aq)):
            termination = "breakdown"
            break
        ray = float(V[:, j] @ Aq)
        min_ray = min(min_ray, ray)
        if ray <= -CURVATURE_TOL:
            termination = "negative_curvature"
            if j == 0:
                fallback = _curvature_fallback(b, bnorm * bnorm, ray * bnorm * bnorm, Aq * bnorm)
                history.append(fallback[1])
            break
        h = np.zeros(j + 2)
        wv = Aq.copy()
        for i in range(j + 1):
            h[i] = V[:, i] @ wv
            wv -= h[i] * V[:, i]
        hnorm = float(np.linalg.norm(wv))
        if hnorm <= 1e-14 * float(np.linalg.norm(Aq)) or j + 1 == n:
            hnorm = 0.0  # Krylov space is invariant
        if hnorm > 0 and np.max(np.abs(V[:, : j + 1].T @ wv)) > REORTH_TOL * hnorm:
            for i in range(j + 1):
                c = V[:, i] @ wv
                h[i] += c
                wv -= c * V[:, i]
            hnorm = float(np.linalg.norm(wv))
            if hnorm > 0 and np.max(np.abs(V[:, : j + 1].T @ wv)) > REORTH_TOL * hnorm:
                hnorm = 0.0  # what is left is rounding noise: the space is numerically exhausted
        h[j + 1] = hnorm
        for i in range(j):
            t = cs[i] * h[i] + sn[i] * h[i + 1]
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
            h[i] = t
        rho = math.hypot(h[j], h[j + 1])
        if rho == 0.0:
            termination = "breakdown"
            break
        cs[j], sn[j] = h[j] / rho, h[j + 1] / rho
        h[j], h[j + 1] = rho, 0.0
        R[: j + 1, j] = h[: j + 1]
        gvec[j + 1] = -sn[j] * gvec[j]
        gvec[j] = cs[j] * gvec[j]
        k = j + 1
        resid = float(abs(gvec[j + 1]))
        history.append(resid)
        if resid <= tol:
            termination = "tolerance"
            break
        if hnorm == 0.0:
            # the least-squares solution is exact on an invariant subspace
            termination = "tolerance" if resid <= max(tol, 1e-14 * bnorm) else "breakdown"
            break
        V[:, j + 1] = wv / hnorm
    if fallback is not None:
        return KrylovOutcome(fallback[0], fallback[1], its, termination, min_ray, history)
    if k == 0:
        return KrylovOutcome(np.zeros_like(b), bnorm, its, termination, min_ray, history)
    y = np.zeros(k)
    for i in range(k - 1, -1, -1):
        y[i] = (gvec[i] - R[i, i + 1 : k] @ y[i + 1 :]) / R[i, i]
    return KrylovOutcome(V[:, :k] @ y, resid, its, termination, min_ray, history)


SOLVERS = {"cg": cg_solve, "minres": minres_solve, "gmres": gmres_solve}


@dataclass(frozen=True)
class PolynomialCheckReport:
    m: int
    n_polys: int
    cg_error: float
    cg_min_bound: float
    cg_violations: int
    gmres_residual: float
    gmres_min_bound: float
    gmres_violations: int

    @property
    def passed(self) -> bool:
        return self.cg_violations == 0 and self.gmres_violations == 0


def krylov_polynomial_check(A, b, m: int, rng: SeededRng | None = None, n_polys: int = 200, rtol: float = 1e-9):
    """Compare m-step CG and GMRES against residual polynomials.

    For every sampled q of degree <= m with q(0) = 1, the CG error in the
    A-norm must satisfy ``|x* - x_m|_A^2 <= sum_k lam_k q(lam_k)^2 (u_k^T e0)^2``
    and the GMRES residual ``|b - A x_m| <= |q(A) b|``. Polynomial
    coefficients are Gaussian, scaled by powers of 1/lam_max.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.shape[0] > 40:
        raise DimensionError("polynomial check is meant for small matrices (d <= 40)")
    rng = rng or SeededRng(0)
    lam, U = np.linalg.eigh(A)
    x_star = U @ ((U.T @ b) / lam)
    e0c = U.T @ x_star
    bc = U.T @ b

    cg = cg_solve(A, b, eta=0.0, max_iter=m)
    e = x_star - cg.step
    cg_err = max(float(e @ A @ e), 0.0)
    gm = gmres_solve(A, b, eta=0.0, max_iter=m)
    gm_res = float(np.linalg.norm(b - A @ gm.step))

    scale = np.max(np.abs(lam))
    powers = np.vander(lam / scale, m + 1, increasing=True)  # d x (m+1)
    cg_bounds, gm_bounds = [], []
    for _ in range(n_polys):
        c = np.concatenate([[1.0], rng.normal(m)])
        q = powers @ c
        cg_bounds.append(float(np.sum(lam * q * q * e0c * e0c)))
        gm_bounds.append(float(np.sqrt(np.sum(q * q * bc * bc))))
    cg_bounds = np.array(cg_bounds)
    gm_bounds = np.array(gm_bounds)
    floor = 1e-24 * max(1.0, float(b @ b))
    return PolynomialCheckReport(
        m=m,
        n_polys=n_polys,
        cg_error=cg_err,
        cg_min_bound=float(cg_bounds.min()),
        cg_violations=int(np.sum(cg_err > cg_bounds * (1 + rtol) + floor)),
        gmres_residual=gm_res,
        gmres_min_bound=float(gm_bounds.min()),
        gmres_violations=int(np.sum(gm_res > gm_bounds * (1 + rtol) + np.sqrt(floor))),
    )
