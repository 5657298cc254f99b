"""Outer iterations: low-rank saddle-free Newton, Newton-Krylov, and baselines.

One iteration draws a gradient batch X_k and a Hessian batch S_k within it,
computes a search direction, picks a step length and records telemetry.
Telemetry (train/test loss and gradient norm at the new iterate) is computed
with unmetered evaluations so it never eats into the sweep budget.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import Batch, Dataset, subsample
from .errors import (
    AccountingError,
    ConfigError,
    DimensionError,
    NonFiniteLossError,
    RegularizationError,
    SnkError,
    StepRejectedError,
)
from .krylov import SOLVERS, ForcingSchedule, forcing_eta
from .lowrank import HessianOperator, min_eig_estimate, randomized_eig, smw_solve
from .numerics import SeededRng

__all__ = [
    "METHODS",
    "NEWTON_METHODS",
    "OptimizerConfig",
    "IterationRecord",
    "RunTrace",
    "StepReport",
    "LineSearchResult",
    "line_search",
    "check_stationary",
    "step_lrsfn",
    "step_inkrylov",
    "baseline_step",
    "init_baseline_state",
    "run",
    "predicted_sweeps",
    "sweep_budget_report",
]

METHODS = ("lrsfn", "lr-newton", "incg", "inminres", "ingmres", "gd", "sgd", "adam")
NEWTON_METHODS = ("lrsfn", "lr-newton", "incg", "inminres", "ingmres")
KRYLOV_SOLVER = {"incg": "cg", "inminres": "minres", "ingmres": "gmres"}

ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_HALVINGS = 10
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

_ALIASES = {"N_X": "n_x", "N_S": "n_s", "eps_H": "eps_h", "r": "rank", "p": "oversampling"}


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "lrsfn"
    name: str = ""
    gamma: float = 0.1
    rank: int = 20
    oversampling: int = 5
    forcing: str = "gradient-norm"
    eta_max: float = 0.5
    eta_const: float = 0.1
    krylov_max_iter: int | None = None
    alpha_policy: str = "line-search"
    alpha: float = 1.0
    ls_fallback: str = "last"
    eps_g: float = 1e-8
    eps_h: float = 1e-3
    n_x: int | None = None
    n_s: int | None = None
    batching: str = "semi-stochastic"
    batch_fraction: float = 0.1
    max_sweeps: float = 1e4
    max_iterations: int | None = None
    seed: int = 0
    init_scale: float = 1.0
    warmup_gd_steps: int | None = None
    record_spectrum: bool = False
    checkpoint_every: int = 0
    timing: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.warmup_gd_steps is None:
            object.__setattr__(self, "warmup_gd_steps", 2 if self.method in ("inminres", "ingmres") else 0)
        if not self.name:
            object.__setattr__(self, "name", self.method)
        checks = [
            (self.gamma >= 0, "gamma must be >= 0"),
            (self.eps_g > 0 and self.eps_h > 0, "eps_g and eps_h must be positive"),
            (self.rank >= 1 and self.oversampling >= 0, "rank must be >= 1 and oversampling >= 0"),
            (self.alpha_policy in ("line-search", "fixed"), "alpha_policy must be 'line-search' or 'fixed'"),
            (self.alpha > 0, "alpha must be positive"),
            (self.ls_fallback in ("last", "best"), "ls_fallback must be 'last' or 'best'"),
            (self.batching in ("semi-stochastic", "fully-stochastic"), "batching must be semi- or fully-stochastic"),
            (0 < self.batch_fraction <= 1, "batch_fraction must lie in (0, 1]"),
            (self.max_sweeps >= 0, "max_sweeps must be >= 0"),
            (self.init_scale >= 0, "init_scale must be >= 0"),
            (self.warmup_gd_steps >= 0, "warmup_gd_steps must be >= 0"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
            (self.n_x is None or self.n_x >= 1, "n_x must be >= 1"),
            (self.n_s is None or self.n_s >= 1, "n_s must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.n_x is not None and self.n_s is not None and self.n_s > self.n_x:
            raise ConfigError(f"n_s={self.n_s} exceeds n_x={self.n_x}; the Hessian batch must lie inside X_k")
        if self.method in NEWTON_METHODS and not self.gamma > self.eps_h:
            raise ConfigError(f"Newton methods need gamma > eps_h (gamma={self.gamma}, eps_h={self.eps_h})")
        ForcingSchedule(self.forcing, self.eta_max, self.eta_const)

    @property
    def schedule(self) -> ForcingSchedule:
        return ForcingSchedule(self.forcing, self.eta_max, self.eta_const)

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        clean = {}
        for key, value in data.items():
            key = _ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown optimizer option {key!r}")
            clean[key] = value
        return cls(**clean)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "OptimizerConfig":
        data = self.to_dict()
        data.update(changes)
        return OptimizerConfig(**data)


@dataclass
class IterationRecord:
    k: int
    sweeps: float
    train_loss: float
    test_loss: float
    grad_norm: float
    alpha: float
    inner_iters: int
    termination: str
    min_eig: float
    wall_time: float = 0.0
    ls_evals: int = 0
    armijo_ok: bool = True
    n_x: int = 0
    n_s: int = 0
    step_norm: float = 0.0
    spectrum: tuple = ()
    discarded: tuple = ()


@dataclass
class RunTrace:
    config: OptimizerConfig
    records: list = field(default_factory=list)
    final_w: np.ndarray | None = None
    status: str = "running"
    error: str = ""
    total_sweeps: float = 0.0
    full_grad_norm: float = math.nan
    checkpoints: dict = field(default_factory=dict)

    @property
    def best_train(self) -> float:
        return min((r.train_loss for r in self.records), default=math.nan)

    @property
    def best_test(self) -> float:
        return min((r.test_loss for r in self.records), default=math.nan)

    @property
    def stationary(self) -> bool:
        return self.status == "stationary"

    @property
    def forced_steps(self) -> list:
        """Iterations whose step was taken without meeting the Armijo condition."""
        return [r.k for r in self.records if not r.armijo_ok]


@dataclass
class StepReport:
    """Outcome of one outer step (before telemetry is attached)."""

    w_next: np.ndarray
    grad_norm: float
    alpha: float
    inner_iters: int
    termination: str
    min_eig: float
    step: np.ndarray
    ls_evals: int = 0
    armijo_ok: bool = True
    stationary: bool = False
    spectrum: tuple = ()
    discarded: tuple = ()
    outcome: object = None


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    evaluations: int
    armijo_ok: bool
    loss: float


def line_search(model, w, p, g, batch: Batch, alpha0: float = 1.0, f0: float | None = None, fallback: str = "last"):
    """Armijo backtracking: alpha0, then up to 10 halvings.

    Every trial is a metered loss-only evaluation. If no trial satisfies the
    sufficient-decrease test the step is still taken, with the last finite
    trial (``fallback='last'``) or the lowest-loss trial (``'best'``).
    """
    w = np.asarray(w, dtype=float)
    p = np.asarray(p, dtype=float)
    if f0 is None:
        f0 = model.loss(w, batch)
    slope = float(g @ p)
    alpha = float(alpha0)
    evals = 0
    finite = []
    for _ in range(MAX_HALVINGS + 1):
        evals += 1
        try:
            f = model.loss(w + alpha * p, batch)
        except NonFiniteLossError:
            alpha *= BACKTRACK
            continue
        if f <= f0 + ARMIJO_C1 * alpha * slope:
            return LineSearchResult(alpha, evals, True, f)
        finite.append((alpha, f))
        alpha *= BACKTRACK
    if not finite:
        raise StepRejectedError(
            f"every line-search trial gave a non-finite loss (|p|={np.linalg.norm(p):.3e})",
            alpha=alpha / BACKTRACK,
            step_norm=float(np.linalg.norm(p)),
        )
    a, f = finite[-1] if fallback == "last" else min(finite, key=lambda t: t[1])
    return LineSearchResult(a, evals, False, f)


def check_stationary(grad_norm: float, min_eig_est: float, cfg: OptimizerConfig) -> bool:
    return grad_norm <= cfg.eps_g and min_eig_est >= -cfg.eps_h


def _take_step(model, w, p, g, f0, X_k, cfg, warmup=False):
    if cfg.alpha_policy == "fixed":
        w_next = w + cfg.alpha * p
        if not np.all(np.isfinite(w_next)):
            raise StepRejectedError("non-finite iterate after step", cfg.alpha, float(np.linalg.norm(p)))
        return w_next, cfg.alpha, 0, True
    ls = line_search(model, w, p, g, X_k, 1.0, f0, cfg.ls_fallback)
    return w + ls.alpha * p, ls.alpha, ls.evaluations, ls.armijo_ok


def _effective_rank(cfg, dim):
    r = min(cfg.rank, dim)
    return r, min(cfg.oversampling, dim - r)


def step_lrsfn(model, w, X_k: Batch, S_k: Batch, cfg: OptimizerConfig, rng: SeededRng, flip: bool | None = None):
    """One low-rank (saddle-free) Newton step.

    The factor approximates the data Hessian on S_k; the gradient on X_k
    carries the Tikhonov term, which the Woodbury solve supplies as the gamma
    shift. ``flip`` defaults to ``cfg.method == 'lrsfn'``.
    """
    if flip is None:
        flip = cfg.method != "lr-newton"
    f0, g = model.loss_and_gradient(w, X_k)
    gnorm = float(np.linalg.norm(g))
    r, p_os = _effective_rank(cfg, model.dim)
    factor = randomized_eig(HessianOperator(model, w, S_k, tikhonov=False), r, p_os, rng)
    min_est = min_eig_estimate(factor)
    spectrum = tuple(float(v) for v in factor.lambdas)
    discarded = tuple(float(v) for v in factor.discarded)
    if check_stationary(gnorm, min_est, cfg):
        return StepReport(w, gnorm, 0.0, r, "lowrank", min_est, np.zeros_like(w), stationary=True,
                          spectrum=spectrum, discarded=discarded)
    p = smw_solve(factor, cfg.gamma, g, flip=flip)
    w_next, alpha, evals, ok = _take_step(model, w, p, g, f0, X_k, cfg)
    return StepReport(w_next, gnorm, alpha, r, "lowrank", min_est, p, evals, ok,
                      spectrum=spectrum, discarded=discarded, outcome=factor)


def step_inkrylov(model, w, X_k: Batch, S_k: Batch, cfg: OptimizerConfig, solver: str | None = None):
    """One inexact Newton step solved by CG, MINRES or GMRES on H_S + gamma I."""
    solver = solver or KRYLOV_SOLVER[cfg.method]
    f0, g = model.loss_and_gradient(w, X_k)
    gnorm = float(np.linalg.norm(g))
    eta = forcing_eta(cfg.schedule, gnorm)
    op = HessianOperator(model, w, S_k, tikhonov=True)
    max_iter = cfg.krylov_max_iter if cfg.krylov_max_iter is not None else min(model.dim, 100)
    out = SOLVERS[solver](op, -g, eta, max_iter)
    # Rayleigh quotients were taken on the shifted operator
    min_est = out.min_rayleigh - model.gamma if math.isfinite(out.min_rayleigh) else math.inf
    if check_stationary(gnorm, min_est, cfg):
        return StepReport(w, gnorm, 0.0, out.iterations, out.termination, min_est, np.zeros_like(w),
                          stationary=True, outcome=out)
    p = out.step
    if not np.all(np.isfinite(p)):
        p = -g / cfg.gamma
    w_next, alpha, evals, ok = _take_step(model, w, p, g, f0, X_k, cfg)
    return StepReport(w_next, gnorm, alpha, out.iterations, out.termination, min_est, p, evals, ok, outcome=out)


def init_baseline_state(method: str, dim: int) -> dict:
    if method == "adam":
        return {"t": 0, "m": np.zeros(dim), "v": np.zeros(dim)}
    if method in ("gd", "sgd"):
        return {}
    raise ConfigError(f"{method!r} is not a first-order baseline")


def baseline_step(method: str, state: dict, w, g, alpha: float):
    """Plain gradient step (gd, sgd) or a bias-corrected Adam step."""
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    if method in ("gd", "sgd"):
        return w - alpha * g, state
    if method != "adam":
        raise ConfigError(f"{method!r} is not a first-order baseline")
    t = state["t"] + 1
    m = ADAM_BETA1 * state["m"] + (1 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state["v"] + (1 - ADAM_BETA2) * g * g
    m_hat = m / (1 - ADAM_BETA1**t)
    v_hat = v / (1 - ADAM_BETA2**t)
    return w - alpha * m_hat / (np.sqrt(v_hat) + ADAM_EPS), {"t": t, "m": m, "v": v}


def _gradient_step(model, w, X_k, cfg, state, termination):
    f0, g = model.loss_and_gradient(w, X_k)
    gnorm = float(np.linalg.norm(g))
    if check_stationary(gnorm, math.inf, cfg) and termination != "warmup":
        return StepReport(w, gnorm, 0.0, 0, termination, math.inf, np.zeros_like(w), stationary=True), state
    if cfg.method == "adam" and termination != "warmup":
        w_next, state = baseline_step("adam", state, w, g, cfg.alpha)
        return StepReport(w_next, gnorm, cfg.alpha, 0, termination, math.inf, w_next - w), state
    w_next, alpha, evals, ok = _take_step(model, w, -g, g, f0, X_k, cfg)
    return StepReport(w_next, gnorm, alpha, 0, termination, math.inf, -g, evals, ok), state


def run(model, train: Dataset, test: Dataset, cfg: OptimizerConfig, w0=None) -> RunTrace:
    """Optimize from a seeded random start (or ``w0``) until the sweep budget is spent.

    The model is cloned with ``cfg.gamma`` and a fresh ledger; sweeps in the
    trace count only work done by this run.
    """
    model = model.clone(gamma=cfg.gamma)
    ledger = model.ledger
    rng = SeededRng(cfg.seed)
    w = cfg.init_scale * rng.normal(model.dim)
    if w0 is not None:
        w = np.array(w0, dtype=float)
        if w.shape != (model.dim,):
            raise DimensionError(f"w0 has shape {w.shape}, expected ({model.dim},)")
    perm = rng.permutation(len(train))
    n_x = min(cfg.n_x or len(train), len(train))
    n_s = min(cfg.n_s or n_x, n_x)
    pool = Batch(train, perm[:n_x])
    test_batch = test.all()
    minibatch = max(1, int(round(cfg.batch_fraction * n_x)))
    stochastic = cfg.batching == "fully-stochastic" or cfg.method == "sgd"
    state = init_baseline_state(cfg.method, model.dim) if cfg.method in ("gd", "sgd", "adam") else None

    trace = RunTrace(cfg)
    t0 = time.perf_counter()

    def clock():
        return time.perf_counter() - t0 if cfg.timing else 0.0

    def telemetry(w_):
        return (
            model.evaluate(w_, pool),
            model.evaluate(w_, test_batch),
            float(np.linalg.norm(model.evaluate_gradient(w_, pool))),
        )

    try:
        tr, te, gn = telemetry(w)
    except NonFiniteLossError as exc:
        trace.status, trace.error, trace.final_w = "failed", str(exc), w
        return trace
    trace.records.append(IterationRecord(0, 0.0, tr, te, gn, 0.0, 0, "init", math.nan, clock()))
    if cfg.checkpoint_every:
        trace.checkpoints[0] = w.copy()

    k = 0
    while True:
        if ledger.sweeps >= cfg.max_sweeps:
            trace.status = "budget"
            break
        if cfg.max_iterations is not None and k >= cfg.max_iterations:
            trace.status = "max_iterations"
            break
        k += 1
        if stochastic:
            X_k = Batch(train, pool.indices[rng.choice(n_x, minibatch, replace=False)])
        else:
            X_k = pool
        S_k = subsample(rng, X_k, min(n_s, len(X_k)))
        try:
            if k <= cfg.warmup_gd_steps:
                rep, state = _gradient_step(model, w, X_k, cfg, state, "warmup")
            elif cfg.method in ("lrsfn", "lr-newton"):
                rep = step_lrsfn(model, w, X_k, S_k, cfg, rng)
            elif cfg.method in KRYLOV_SOLVER:
                rep = step_inkrylov(model, w, X_k, S_k, cfg)
            else:
                rep, state = _gradient_step(model, w, X_k, cfg, state, "gradient")
            if rep.stationary:
                trace.status = "stationary"
                break
            w = rep.w_next
            tr, te, gn = telemetry(w)
        except (StepRejectedError, NonFiniteLossError, RegularizationError) as exc:
            trace.status, trace.error = "failed", f"iteration {k}: {exc}"
            break
        except SnkError as exc:
            trace.status, trace.error = "failed", f"iteration {k}: {type(exc).__name__}: {exc}"
            break
        trace.records.append(
            IterationRecord(
                k, ledger.sweeps, tr, te, gn, rep.alpha, rep.inner_iters, rep.termination, rep.min_eig, clock(),
                rep.ls_evals, rep.armijo_ok, len(X_k), len(S_k), rep.alpha * float(np.linalg.norm(rep.step)),
                rep.spectrum if cfg.record_spectrum else (), rep.discarded if cfg.record_spectrum else (),
            )
        )
        if cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
            trace.checkpoints[k] = w.copy()

    trace.final_w = w
    trace.total_sweeps = ledger.sweeps
    try:
        trace.full_grad_norm = float(np.linalg.norm(model.evaluate_gradient(w, train.all())))
    except NonFiniteLossError:
        trace.full_grad_norm = math.nan
    return trace


def predicted_sweeps(record: IterationRecord, cfg: OptimizerConfig, dim: int) -> float:
    """Sweep cost of one iteration from the closed-form cost model."""
    cost = record.n_x + 0.5 * record.ls_evals * record.n_x
    if record.termination in ("warmup", "gradient", "init"):
        return cost
    if cfg.method in ("lrsfn", "lr-newton"):
        r, p = _effective_rank(cfg, dim)
        return cost + 4 * (r + p) * record.n_s
    return cost + 2 * record.inner_iters * record.n_s


def sweep_budget_report(trace: RunTrace, dim: int, strict: bool = True):
    """Rows of ``(k, predicted, metered)`` per iteration.

    With ``strict`` a mismatch raises :class:`AccountingError`.
    """
    rows = []
    for prev, rec in zip(trace.records, trace.records[1:]):
        predicted = predicted_sweeps(rec, trace.config, dim)
        metered = rec.sweeps - prev.sweeps
        rows.append((rec.k, predicted, metered))
        if strict and predicted != metered:
            raise AccountingError(f"iteration {rec.k}: formula predicts {predicted} sweeps, ledger metered {metered}")
    return rows
