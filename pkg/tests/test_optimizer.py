import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snk.data import Batch
from snk.errors import ConfigError, StepRejectedError
from snk.models import QuadraticProblem, ScalarFieldModel, make_saddle_problem
from snk.numerics import SeededRng
from snk.optimizer import (
    OptimizerConfig,
    baseline_step,
    check_stationary,
    init_baseline_state,
    line_search,
    predicted_sweeps,
    run,
    step_inkrylov,
    step_lrsfn,
    sweep_budget_report,
)


def quartic():
    return ScalarFieldModel(1, lambda w: w[0] ** 4, lambda w: np.array([4 * w[0] ** 3]), lambda w: np.array([[12 * w[0] ** 2]]))


def spd_quadratic(**kw):
    opts = dict(w_star=np.linspace(-1, 1, 6), n_train=40, n_test=10, seed=2)
    opts.update(kw)
    return QuadraticProblem([5.0, 3.0, 2.0, 1.0, 0.7, 0.4], **opts)


# --- line search ---------------------------------------------------------------


def test_newton_step_accepted_at_unit_step():
    q = spd_quadratic()
    b = q.train.all()
    w = np.zeros(6)
    g = q.gradient(w, b)
    p = -np.linalg.solve(q.batch_hessian(b), g)
    res = line_search(q, w, p, g, b)
    assert res.alpha == 1.0 and res.evaluations == 1 and res.armijo_ok


def test_ascent_direction_taken_anyway():
    q = spd_quadratic()
    b = q.train.all()
    w = np.ones(6)
    g = q.gradient(w, b)
    res = line_search(q, w, g, g, b)
    assert not res.armijo_ok
    assert res.alpha == 2.0**-10 and res.evaluations == 11
    best = line_search(q, w, g, g, b, fallback="best")
    assert best.alpha == 2.0**-10  # smallest ascent step is also the lowest loss


def test_quartic_hand_oracle():
    m = quartic()
    b = m.train.all()
    w = np.array([1.0])
    g = m.gradient(w, b)
    p = -g
    # by hand: F(1 - 4a) <= 1 - 1e-4 * a * 16 first holds for a = 1/4 (F = 0)
    alpha, f0 = 1.0, 1.0
    while not (1 - 4 * alpha) ** 4 <= f0 - 1e-4 * alpha * 16:
        alpha /= 2
    res = line_search(m, w, p, g, b)
    assert res.alpha == alpha == 0.25
    assert res.evaluations == 3 and res.loss == 0.0


def test_all_nonfinite_trials_rejected():
    m = ScalarFieldModel(1, lambda w: np.inf if abs(w[0]) > 0 else 0.0, lambda w: np.zeros(1), lambda w: np.zeros((1, 1)))
    with pytest.raises(StepRejectedError):
        line_search(m, np.zeros(1), np.ones(1), -np.ones(1), m.train.all(), f0=0.0)


def test_line_search_meters_half_sweeps():
    q = spd_quadratic()
    b = Batch(q.train, np.arange(10))
    q.ledger.__init__()
    w = np.ones(6)
    g = q.evaluate_gradient(w, b)
    res = line_search(q, w, -g, g, b, f0=q.evaluate(w, b))
    assert q.ledger.sweeps == res.evaluations * 10 / 2


# --- stationarity and baselines --------------------------------------------------


def test_check_stationary_cases():
    cfg = OptimizerConfig(eps_g=1e-6, eps_h=1e-3)
    assert check_stationary(0.0, 1.0, cfg)
    assert not check_stationary(2e-6, 1.0, cfg)
    assert not check_stationary(5e-7, -2e-3, cfg)


def test_gd_and_sgd_steps():
    w, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert np.array_equal(baseline_step("gd", {}, w, g, 0.1)[0], w - 0.1 * g)
    assert np.array_equal(baseline_step("sgd", {}, w, np.zeros(2), 0.3)[0], w)


def test_adam_first_step_hand_oracle():
    state = init_baseline_state("adam", 3)
    g = np.array([1.0, -2.0, 0.5])
    w1, state = baseline_step("adam", state, np.zeros(3), g, 0.01)
    # bias-corrected moments equal g and g^2 on step one
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(w1, expected, rtol=0, atol=1e-15)
    w2, state = baseline_step("adam", state, w1, g, 0.01)
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    expected2 = w1 - 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(w2, expected2, rtol=1e-14, atol=0)
    assert state["t"] == 2


# --- single steps ------------------------------------------------------------------


def test_lrsfn_step_on_indefinite_quadratic_closed_form():
    m = make_saddle_problem("indefinite-quadratic", gamma=0.1)
    b = m.train.all()
    cfg = OptimizerConfig(method="lrsfn", gamma=0.1, rank=2, oversampling=0, alpha_policy="fixed", alpha=1.0)
    w = np.array([0.0, 0.1])
    rep = step_lrsfn(m, w, b, b, cfg, SeededRng(0))
    p_oracle = np.array([0.0, -0.1 * (-1 + 0.1) / 1.1])
    assert np.allclose(rep.step, p_oracle, atol=1e-12)
    assert abs(rep.w_next[1]) > 0.1
    assert m.evaluate(rep.w_next, b) < m.evaluate(w, b)
    assert rep.min_eig == pytest.approx(-1.0, abs=1e-10)


def test_lrsfn_full_rank_is_newton():
    q = spd_quadratic(gamma=1e-9)
    b = q.train.all()
    cfg = OptimizerConfig(method="lrsfn", gamma=1e-9, eps_h=1e-10, rank=6, oversampling=0, alpha_policy="fixed")
    rep = step_lrsfn(q, np.zeros(6), b, b, cfg, SeededRng(1))
    assert np.linalg.norm(rep.w_next - q.w_star) <= 1e-6


def test_lrsfn_zero_gradient_fixed_point():
    q = spd_quadratic(gamma=0.0)
    b = q.train.all()
    cfg = OptimizerConfig(method="lrsfn", gamma=0.1, rank=3, oversampling=2)
    rep = step_lrsfn(q.clone(gamma=0.0), q.w_star, b, b, cfg.replace(eps_g=1e-10), SeededRng(2))
    assert rep.stationary and np.array_equal(rep.w_next, q.w_star)
    assert np.all(rep.step == 0)


def test_inkrylov_exact_solve_lands_on_regularized_minimizer():
    q = spd_quadratic(gamma=0.05)
    b = q.train.all()
    cfg = OptimizerConfig(method="incg", gamma=0.05, forcing="constant", eta_const=1e-14, alpha_policy="fixed")
    rep = step_inkrylov(q, np.zeros(6), b, b, cfg)
    H = q.mean_hessian
    target = np.linalg.solve(H + 0.05 * np.eye(6), H @ q.w_star)
    assert np.linalg.norm(rep.w_next - target) <= 1e-8


@pytest.mark.parametrize("method", ["incg", "inminres", "ingmres"])
def test_inkrylov_flags_negative_curvature_and_descends(method):
    m = make_saddle_problem("indefinite-quadratic", gamma=0.1)
    b = m.train.all()
    cfg = OptimizerConfig(method=method, gamma=0.1)
    w = np.array([0.05, 0.1])
    rep = step_inkrylov(m, w, b, b, cfg)
    assert rep.termination == "negative_curvature"
    assert m.evaluate(rep.w_next, b) < m.evaluate(w, b)


def test_inkrylov_zero_gradient():
    q = spd_quadratic(gamma=0.0)
    b = q.train.all()
    cfg = OptimizerConfig(method="incg", gamma=0.1)
    rep = step_inkrylov(q, q.w_star, b, b, cfg)
    assert rep.inner_iters == 0 and np.array_equal(rep.w_next, q.w_star)


# --- full runs -----------------------------------------------------------------------


def test_gd_monotone_and_reaches_eps_g():
    q = spd_quadratic()
    cfg = OptimizerConfig(method="gd", gamma=0.0, alpha_policy="fixed", alpha=0.15, eps_g=1e-6, max_sweeps=1e6)
    tr = run(q, q.train, q.test, cfg)
    losses = [r.train_loss for r in tr.records]
    assert np.all(np.diff(losses) <= 0)
    assert tr.status == "stationary" and tr.records[-1].grad_norm <= 1e-6 * 1.5
    assert tr.total_sweeps <= 1e6


def test_empty_budget_keeps_initial_record():
    q = spd_quadratic()
    tr = run(q, q.train, q.test, OptimizerConfig(method="lrsfn", rank=3, max_sweeps=0))
    assert len(tr.records) == 1 and tr.records[0].termination == "init" and tr.status == "budget"


@pytest.mark.parametrize("method", ["lrsfn", "incg", "inminres", "ingmres", "gd", "sgd", "adam"])
def test_runs_are_deterministic(method):
    q = spd_quadratic(sigma_h=0.3, grad_noise=0.2)
    cfg = OptimizerConfig(method=method, rank=3, n_x=30, n_s=10, alpha=0.05 if method in ("sgd", "adam") else 1.0,
                          max_sweeps=3000, seed=5)
    a, b = run(q, q.train, q.test, cfg), run(q, q.train, q.test, cfg)
    strip = lambda tr: [{k: v for k, v in vars(r).items() if k != "wall_time"} for r in tr.records]
    assert strip(a) == strip(b)
    assert np.array_equal(a.final_w, b.final_w)


@pytest.mark.parametrize("method", ["lrsfn", "incg", "inminres", "ingmres", "gd", "sgd", "adam"])
def test_metered_sweeps_match_cost_model(method):
    q = spd_quadratic(sigma_h=0.3, grad_noise=0.2)
    cfg = OptimizerConfig(method=method, rank=3, oversampling=2, n_x=30, n_s=10, max_sweeps=5000, seed=1,
                          alpha=0.05 if method == "adam" else 1.0)
    tr = run(q, q.train, q.test, cfg)
    rows = sweep_budget_report(tr, q.dim)
    assert rows and all(p == m for _, p, m in rows)
    assert all((2 * m) == int(2 * m) for _, _, m in rows)


def test_budget_enforcement_window():
    q = spd_quadratic(sigma_h=0.3)
    cfg = OptimizerConfig(method="incg", n_x=30, n_s=10, max_sweeps=2000, seed=3, eps_g=1e-300)
    tr = run(q, q.train, q.test, cfg)
    last_cost = tr.records[-1].sweeps - tr.records[-2].sweeps
    assert 2000 <= tr.total_sweeps <= 2000 + last_cost


def test_gd_fixed_alpha_costs_n_x_per_iteration():
    q = spd_quadratic()
    tr = run(q, q.train, q.test, OptimizerConfig(method="gd", alpha_policy="fixed", alpha=0.1, n_x=25, max_iterations=5))
    assert [r.sweeps for r in tr.records] == [0, 25, 50, 75, 100, 125]


def test_accepted_steps_never_increase_loss_on_deterministic_problem():
    q = spd_quadratic(sigma_h=0.3)
    for method in ("lrsfn", "incg", "gd"):
        tr = run(q, q.train, q.test, OptimizerConfig(method=method, rank=2, max_sweeps=4000, seed=2))
        for prev, rec in zip(tr.records, tr.records[1:]):
            if rec.armijo_ok:
                assert rec.train_loss <= prev.train_loss
            else:
                assert rec.k in tr.forced_steps


def test_stationary_exit_is_sound():
    q = spd_quadratic()
    cfg = OptimizerConfig(method="incg", eps_g=1e-7, max_sweeps=1e6, forcing="gradient-norm")
    tr = run(q, q.train, q.test, cfg)
    assert tr.status == "stationary"
    assert tr.full_grad_norm <= 2e-7


def test_fully_stochastic_batch_sizes():
    q = spd_quadratic()
    cfg = OptimizerConfig(method="incg", batching="fully-stochastic", batch_fraction=0.25, n_s=5, max_iterations=3)
    tr = run(q, q.train, q.test, cfg)
    assert {r.n_x for r in tr.records[1:]} == {10}
    assert {r.n_s for r in tr.records[1:]} == {5}


def test_warmup_steps_for_gmres_and_minres():
    assert OptimizerConfig(method="ingmres").warmup_gd_steps == 2
    assert OptimizerConfig(method="incg").warmup_gd_steps == 0
    q = spd_quadratic()
    tr = run(q, q.train, q.test, OptimizerConfig(method="inminres", max_iterations=4))
    assert [r.termination for r in tr.records[1:3]] == ["warmup", "warmup"]


def test_record_spectrum_and_checkpoints():
    q = spd_quadratic()
    tr = run(q, q.train, q.test, OptimizerConfig(method="lrsfn", rank=3, record_spectrum=True, checkpoint_every=2,
                                                 max_iterations=4))
    assert len(tr.records[1].spectrum) == 3
    assert sorted(tr.checkpoints) == [0, 2, 4]


def test_failed_run_is_reported_not_raised():
    m = ScalarFieldModel(1, lambda w: -np.exp(w[0] ** 2) if abs(w[0]) < 20 else math.inf,
                         lambda w: np.array([-2 * w[0] * np.exp(w[0] ** 2)]), lambda w: np.zeros((1, 1)))
    tr = run(m, m.train, m.test, OptimizerConfig(method="gd", alpha_policy="fixed", alpha=10.0, max_iterations=50,
                                                 init_scale=1.0))
    assert tr.status == "failed" and tr.error


def test_config_validation_and_aliases():
    cfg = OptimizerConfig.from_dict({"method": "lrsfn", "N_X": 100, "N_S": 10, "r": 5, "p": 3, "eps_H": 1e-4})
    assert (cfg.n_x, cfg.n_s, cfg.rank, cfg.oversampling, cfg.eps_h) == (100, 10, 5, 3, 1e-4)
    assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg
    bad = [
        {"method": "newton"},
        {"method": "incg", "gamma": 1e-4},
        {"n_x": 5, "n_s": 6},
        {"alpha_policy": "wolfe"},
        {"bogus": 1},
    ]
    for d in bad:
        with pytest.raises(ConfigError):
            OptimizerConfig.from_dict(d)


@given(st.integers(1, 8), st.integers(0, 4), st.integers(1, 40), st.integers(0, 12), st.integers(0, 11))
def test_predicted_sweeps_half_integers(r, p, n_s, inner, ls):
    from snk.optimizer import IterationRecord

    for method, term in (("lrsfn", "lowrank"), ("incg", "tolerance"), ("gd", "gradient")):
        cfg = OptimizerConfig(method=method, rank=r, oversampling=p, gamma=0.1)
        rec = IterationRecord(1, 0.0, 0.0, 0.0, 0.0, 1.0, inner, term, 0.0, ls_evals=ls, n_x=2 * n_s + 1, n_s=n_s)
        cost = predicted_sweeps(rec, cfg, 50)
        assert 2 * cost == int(2 * cost) and cost >= rec.n_x


def test_explicit_start_point():
    from snk.errors import DimensionError

    q = spd_quadratic()
    cfg = OptimizerConfig(method="gd", max_iterations=1)
    tr = run(q, q.train, q.test, cfg, w0=q.w_star)
    regularized = q.clone(gamma=cfg.gamma)
    assert tr.records[0].train_loss == regularized.evaluate(q.w_star, q.train.all())
    with pytest.raises(DimensionError):
        run(q, q.train, q.test, cfg, w0=np.zeros(3))
