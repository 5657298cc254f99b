"""Monte Carlo checks of one-step local convergence bounds on sampled quadratics.

Each check places iterates at ``w* + delta u`` (random unit ``u``), draws
independent batch pairs (X_k, S_k), takes one step of the method under test
and compares the sample mean of ``|w_{k+1} - w*|`` against the predicted
``c0 + c1 delta + c2 delta^2``. A violation is declared only when the mean
minus three standard errors exceeds the bound.

Bound families (constants in terms of L, v, sigma, M, gamma, eps_H):

``inexact-newton``
    CG with the configured forcing schedule;
    ``c0 = a v/sqrt(N_X) (1 + v/sqrt(N_X)) / (gamma - eps_H)``,
    ``c1 = (L|1-a| + sigma/sqrt(N_S) + 2 a v mu/sqrt(N_X)) / (gamma - eps_H)``,
    ``c2 = (M/2 + a mu^2) / (gamma - eps_H)`` with
    ``mu = min(1/|H* + gamma I|, |(H* + gamma I)^-1|)``.
``low-rank-newton``
    randomized low-rank Newton step; with ``lr = |E[lambda_r] + gamma|``,
    ``c0 = a v / (lr sqrt(N_X))``,
    ``c1 = (L|1-a| + E |E[lambda_{r+1}]| + gamma + sigma/sqrt(N_S)) / lr``,
    ``c2 = M / (2 lr)``, ``E = 1 + 4 sqrt(d (r+p)) / (p-1)``.
``newton-cg``
    exactly r CG iterations; ``c1`` gains
    ``2 a L sqrt(k) ((sqrt(k)-1)/(sqrt(k)+1))^r`` with k the worst condition
    number of the regularized subsampled Hessians.
``newton-gmres`` / ``newton-minres``
    exactly r iterations;
    ``c0 = a/(gamma-eps_H) (v/sqrt(N_X) + eps_g E/(gamma-eps_H))``,
    ``c1 = (L|1-a| + sigma/sqrt(N_S) + a L_X E/(gamma-eps_H)) / (gamma-eps_H)``,
    with E the Chebyshev ratio (GMRES) or ``(1 - (gamma-eps_H)^2/L^2)^(r/2)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .assumptions import AssumptionConstants, estimate_assumption_constants
from .data import sample_batch, subsample
from .errors import ConfigError
from .lowrank import HessianOperator, randomized_eig, smw_solve
from .models import QuadraticProblem
from .numerics import SeededRng
from .optimizer import OptimizerConfig, step_inkrylov

__all__ = ["BOUNDS", "BoundRow", "BoundCheckReport", "verify_bound", "chebyshev_ratio", "randomized_error_factor"]

BOUNDS = ("inexact-newton", "low-rank-newton", "newton-cg", "newton-gmres", "newton-minres")
EXACT_ETA = 1e-14


def randomized_error_factor(d: int, r: int, p: int) -> float:
    return 1.0 + 4.0 * math.sqrt(d * (r + p)) / (p - 1)


def _log_cosh_acosh(r: int, x: float) -> float:
    """log C_r(x) for x >= 1, where C_r is the degree-r Chebyshev polynomial."""
    t = r * math.acosh(x)
    return t + math.log1p(math.exp(-2.0 * t)) - math.log(2.0)


def chebyshev_ratio(r: int, L: float, gamma: float, eps_h: float, eps: float = 0.0) -> float:
    """``L/(gamma-eps_H) * C_r(a/d) / |C_r(c/d)|`` for the GMRES bound."""
    shift = gamma - eps_h
    a = (L - shift) + 2.0 * eps
    c = 0.5 * (L + shift)
    dd = 0.5 * (L - shift)
    if dd <= 0:
        return 0.0
    log_ratio = _log_cosh_acosh(r, max(a / dd, 1.0)) - _log_cosh_acosh(r, c / dd)
    return L / shift * math.exp(min(log_ratio, 700.0))


@dataclass(frozen=True)
class BoundRow:
    delta: float
    mean_error: float
    std_error: float
    bound: float
    c0: float
    c1: float
    c2: float

    @property
    def violated(self) -> bool:
        return bool(self.mean_error - 3.0 * self.std_error > self.bound)


@dataclass
class BoundCheckReport:
    bound: str
    constants: AssumptionConstants
    details: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    trials: int = 0

    @property
    def violations(self) -> int:
        return sum(r.violated for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "bound": self.bound,
            "trials": self.trials,
            "violations": self.violations,
            "constants": asdict(self.constants),
            "details": self.details,
            "rows": [
                {"delta": r.delta, "mean_error": r.mean_error, "std_error": r.std_error, "bound": r.bound,
                 "c0": r.c0, "c1": r.c1, "c2": r.c2, "violated": r.violated}
                for r in self.rows
            ],
        }


def _unit(rng, d):
    u = rng.normal(d)
    return u / np.linalg.norm(u)


def verify_bound(
    bound: str,
    problem: QuadraticProblem,
    cfg: OptimizerConfig,
    trials: int = 1000,
    distances=(0.01, 0.1, 1.0),
    seed: int = 0,
    eps: float = 0.0,
) -> BoundCheckReport:
    """Check one bound family at each distance in ``distances``.

    ``cfg`` supplies gamma, alpha (used as a fixed step), rank/oversampling,
    n_x/n_s and the forcing schedule. ``eps`` is the free slack in the
    GMRES Chebyshev argument.
    """
    if bound not in BOUNDS:
        raise ConfigError(f"unknown bound {bound!r}; choose from {', '.join(BOUNDS)}")
    if not isinstance(problem, QuadraticProblem):
        raise ConfigError("bounds can only be certified on sampled quadratics")
    if trials < 2:
        raise ConfigError("need at least two trials for a standard error")
    model = problem.clone(gamma=cfg.gamma)
    if np.linalg.norm(cfg.gamma * problem.w_star) > 0:
        raise ConfigError("w* must be the regularized minimizer too; build the quadratic with w_star = 0")
    rng = SeededRng(seed)
    d = model.dim
    train = problem.train
    n_x = min(cfg.n_x or len(train), len(train))
    n_s = min(cfg.n_s or n_x, n_x)
    alpha = cfg.alpha
    gamma = cfg.gamma
    r = min(cfg.rank, d)
    p_os = min(cfg.oversampling, d - r)
    w_star = problem.w_star
    dirs = {delta: _unit(rng, d) for delta in distances}

    probes = [w_star] + [w_star + delta * dirs[delta] for delta in distances]
    consts = estimate_assumption_constants(model, train, probes, rng.spawn(1))

    # batch statistics: spectra of subsampled Hessians and gradient noise at w*
    cal = rng.spawn(2)
    lam_min = math.inf
    L_s = L_x = 0.0
    kappa = 1.0
    lam_r1 = []
    grad_star = []
    for _ in range(trials):
        X = sample_batch(cal, train, n_x)
        S = subsample(cal, X, n_s)
        ev_s = np.linalg.eigvalsh(problem.batch_hessian(S, tikhonov=False))
        ev_x = np.linalg.eigvalsh(problem.batch_hessian(X, tikhonov=False))
        lam_min = min(lam_min, ev_s[0])
        L_s = max(L_s, ev_s[-1] + gamma)
        L_x = max(L_x, ev_x[-1] + gamma)
        kappa = max(kappa, (ev_s[-1] + gamma) / (ev_s[0] + gamma))
        desc = np.sort(np.abs(ev_s))[::-1]
        lam_r1.append(desc[r] if r < d else 0.0)
        grad_star.append(np.linalg.norm(model.evaluate_gradient(w_star, X)))
    eps_h = max(0.0, -lam_min)
    if not gamma > eps_h:
        raise ConfigError(f"gamma={gamma} does not exceed the measured eps_H={eps_h:.3g}")
    shift = gamma - eps_h
    eps_g = float(np.mean(grad_star))
    ev_star = np.linalg.eigvalsh(problem.mean_hessian)
    mu = min(1.0 / (ev_star[-1] + gamma), 1.0 / (ev_star[0] + gamma))

    v, sigma, M = consts.v, consts.sigma, consts.M
    details = {
        "eps_H": eps_h, "eps_g": eps_g, "L_S": L_s, "L_X": L_x, "kappa": kappa, "mu": mu,
        "n_x": n_x, "n_s": n_s, "alpha": alpha, "gamma": gamma, "rank": r, "oversampling": p_os,
    }

    step_cfg = cfg.replace(alpha_policy="fixed", eps_g=1e-300, warmup_gd_steps=0)
    if bound == "inexact-newton":
        step_cfg = step_cfg.replace(method="incg", krylov_max_iter=d)
    elif bound in ("newton-cg", "newton-gmres", "newton-minres"):
        method = {"newton-cg": "incg", "newton-gmres": "ingmres", "newton-minres": "inminres"}[bound]
        step_cfg = step_cfg.replace(method=method, forcing="constant", eta_const=EXACT_ETA, krylov_max_iter=r)

    report = BoundCheckReport(bound, consts, details, trials=trials)
    trial_rng = rng.spawn(3)
    for delta in distances:
        w = w_star + delta * dirs[delta]
        errors = np.empty(trials)
        lam_r = []
        for t in range(trials):
            X = sample_batch(trial_rng, train, n_x)
            S = subsample(trial_rng, X, n_s)
            if bound == "low-rank-newton":
                g = model.gradient(w, X)
                factor = randomized_eig(HessianOperator(model, w, S, tikhonov=False), r, p_os, trial_rng)
                lam_r.append(factor.lambdas[-1])
                w_next = w + alpha * smw_solve(factor, gamma, g, flip=True)
            else:
                w_next = step_inkrylov(model, w, X, S, step_cfg).w_next
            errors[t] = np.linalg.norm(w_next - w_star)
        mean = float(errors.mean())
        se = float(errors.std(ddof=1) / math.sqrt(trials))

        if bound == "inexact-newton":
            c0 = alpha * v / math.sqrt(n_x) * (1 + v / math.sqrt(n_x)) / shift
            c1 = (L_s * abs(1 - alpha) + sigma / math.sqrt(n_s) + 2 * alpha * v * mu / math.sqrt(n_x)) / shift
            c2 = (M / 2 + alpha * mu * mu) / shift
        elif bound == "low-rank-newton":
            E = randomized_error_factor(d, r, p_os) if p_os > 1 else 1.0
            lr = abs(float(np.mean(lam_r)) + gamma)
            c0 = alpha * v / (lr * math.sqrt(n_x))
            c1 = (L_s * abs(1 - alpha) + E * abs(float(np.mean(lam_r1))) + gamma + sigma / math.sqrt(n_s)) / lr
            c2 = M / (2 * lr)
            details["E"] = E
            details.setdefault("lambda_r", {})[str(delta)] = float(np.mean(lam_r))
            details["lambda_r_plus_1"] = float(np.mean(lam_r1))
        elif bound == "newton-cg":
            sk = math.sqrt(kappa)
            cg_term = 2 * alpha * L_s * sk * ((sk - 1) / (sk + 1)) ** r
            c0 = alpha * v / (shift * math.sqrt(n_x))
            c1 = (L_s * abs(1 - alpha) + sigma / math.sqrt(n_s) + cg_term) / shift
            c2 = M / (2 * shift)
        else:
            if bound == "newton-gmres":
                E = chebyshev_ratio(r, L_s, gamma, eps_h, eps)
            else:
                E = (1 - shift**2 / L_s**2) ** (r / 2)
            details["E"] = E
            c0 = alpha / shift * (v / math.sqrt(n_x) + eps_g * E / shift)
            c1 = (L_s * abs(1 - alpha) + sigma / math.sqrt(n_s) + alpha * L_x * E / shift) / shift
            c2 = M / (2 * shift)
        report.rows.append(BoundRow(delta, mean, se, c0 + c1 * delta + c2 * delta * delta, c0, c1, c2))
    return report
