import math

import numpy as np
import pytest

from snk.assumptions import dense_hessian, estimate_assumption_constants, top_eigenvalue
from snk.bounds import BOUNDS, chebyshev_ratio, randomized_error_factor, verify_bound
from snk.errors import ConfigError
from snk.lowrank import HessianOperator
from snk.models import QuadraticProblem
from snk.numerics import SeededRng
from snk.optimizer import OptimizerConfig

SPECTRUM = [10.0, 5.0, 2.5, 1.2] + [1.0] * 4


def quad(sigma_h=0.3, grad_noise=0.0, n_train=400):
    return QuadraticProblem(SPECTRUM, sigma_h=sigma_h, grad_noise=grad_noise, n_train=n_train, n_test=20, seed=3)


CFG = OptimizerConfig(method="incg", gamma=0.1, rank=4, oversampling=3, n_x=100, n_s=20)


def test_constants_on_deterministic_quadratic():
    q = quad(sigma_h=0.0)
    w = [np.zeros(8), np.ones(8), -np.ones(8)]
    c = estimate_assumption_constants(q, q.train, w, SeededRng(0))
    assert c.L == pytest.approx(10.0, rel=1e-10)
    assert c.sigma == pytest.approx(0.0, abs=1e-10)
    assert c.M == pytest.approx(0.0, abs=1e-10)
    assert c.n_pairs == 3


def test_sigma_tracks_hessian_noise():
    lo = estimate_assumption_constants(quad(0.1), quad(0.1).train, [np.zeros(8), np.ones(8)], SeededRng(0))
    hi = estimate_assumption_constants(quad(0.5), quad(0.5).train, [np.zeros(8), np.ones(8)], SeededRng(0))
    assert 0 < lo.sigma < hi.sigma


def test_needs_two_probes():
    q = quad()
    with pytest.raises(ConfigError):
        estimate_assumption_constants(q, q.train, [np.zeros(8)], SeededRng(0))


def test_dense_hessian_and_top_eigenvalue():
    q = quad(sigma_h=0.0)
    H = dense_hessian(q, np.zeros(8), q.train.all(), tikhonov=False)
    assert np.allclose(np.sort(np.linalg.eigvalsh(H)), np.sort(SPECTRUM), atol=1e-10)
    op = HessianOperator(q, np.zeros(8), q.train.all(), tikhonov=False)
    assert top_eigenvalue(op, SeededRng(0)) == pytest.approx(10.0, rel=1e-12)


def test_chebyshev_ratio_oracle():
    # C_r(x) = cosh(r acosh x); compare the log-space evaluation with direct numpy polynomials
    L, gamma, eps_h, r = 10.0, 0.5, 0.1, 6
    shift = gamma - eps_h
    a, c, d = L - shift, 0.5 * (L + shift), 0.5 * (L - shift)
    cheb = np.polynomial.chebyshev.Chebyshev.basis(r)
    expected = L / shift * cheb(a / d) / abs(cheb(c / d))
    assert chebyshev_ratio(r, L, gamma, eps_h) == pytest.approx(expected, rel=1e-10)
    assert chebyshev_ratio(r, L, gamma, eps_h, eps=0.1) > chebyshev_ratio(r, L, gamma, eps_h)
    assert chebyshev_ratio(r, L, 0.2, 0.0) > 0 and chebyshev_ratio(r, 0.3, 0.4, 0.0) == 0.0


def test_randomized_error_factor():
    assert randomized_error_factor(100, 10, 5) == pytest.approx(1 + 4 * math.sqrt(1500) / 4)


def test_noise_free_exact_steps_have_zero_error():
    q = quad(sigma_h=0.0)
    for name in ("newton-cg", "newton-gmres", "newton-minres"):
        rep = verify_bound(name, q, CFG.replace(rank=8, alpha=1.0), trials=5, distances=(0.1, 1.0))
        assert rep.violations == 0
        assert all(row.mean_error < 1e-8 for row in rep.rows)
    rep = verify_bound("low-rank-newton", q, CFG.replace(rank=8, oversampling=0), trials=5, distances=(1.0,))
    assert rep.rows[0].mean_error < 1e-8


def test_unit_step_minimizes_error():
    q = quad(sigma_h=0.0)
    errs = {a: verify_bound("inexact-newton", q, CFG.replace(alpha=a), trials=4, distances=(0.5,)).rows[0].mean_error
            for a in (0.25, 0.5, 1.0, 1.5)}
    assert min(errs, key=errs.get) == 1.0


@pytest.mark.parametrize("name", BOUNDS)
def test_bounds_hold_on_noisy_quadratic(name):
    rep = verify_bound(name, quad(sigma_h=0.3, grad_noise=0.1), CFG, trials=40, distances=(0.1, 1.0), seed=1)
    assert rep.violations == 0
    d = rep.to_dict()
    assert d["trials"] == 40 and len(d["rows"]) == 2 and d["bound"] == name


def test_rejections():
    q = quad()
    with pytest.raises(ConfigError):
        verify_bound("newton-lbfgs", q, CFG)
    with pytest.raises(ConfigError):
        verify_bound("inexact-newton", q, CFG, trials=1)
    shifted = QuadraticProblem(SPECTRUM, w_star=np.ones(8), n_train=50, n_test=5, seed=0)
    with pytest.raises(ConfigError):
        verify_bound("inexact-newton", shifted, CFG)
    with pytest.raises(ConfigError):
        verify_bound("inexact-newton", quad(sigma_h=3.0), CFG.replace(n_s=5), trials=20)
