import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snk.errors import ConfigError, DimensionError, RegularizationError
from snk.lowrank import (
    HessianOperator,
    LowRankFactor,
    MatrixOperator,
    flip_spectrum,
    min_eig_estimate,
    randomized_eig,
    smw_solve,
    spectrum_rows,
)
from snk.models import make_saddle_problem
from snk.numerics import SeededRng


def _random_factor(rng, d, r, negative=True):
    U = np.linalg.qr(rng.normal((d, r)))[0]
    lam = rng.uniform(r) * 5 + 0.5
    if negative:
        lam *= np.where(rng.uniform(r) < 0.4, -1.0, 1.0)
    order = np.argsort(-np.abs(lam), kind="stable")
    return LowRankFactor(U[:, order], lam[order])


def _dense_step(factor, gamma, g, flip):
    lam = np.abs(factor.lambdas) if flip else factor.lambdas
    M = (factor.U * lam) @ factor.U.T + gamma * np.eye(factor.dim)
    return np.linalg.solve(M, -g)


def test_diagonal_operator_top_pair():
    op = MatrixOperator(np.diag([10, 5, 1, 0.1, 0.01]))
    f = randomized_eig(op, 2, 2, SeededRng(0), power_iters=2)
    assert np.allclose(f.lambdas, [10, 5], atol=1e-8)
    assert np.allclose(np.abs(f.U), np.eye(5)[:, :2], atol=1e-6)
    assert op.applications == 4 * 4


def test_plain_double_pass_within_error_factor():
    H = np.diag([10, 5, 1, 0.1, 0.01])
    op = MatrixOperator(H)
    f = randomized_eig(op, 2, 2, SeededRng(0))
    assert op.applications == 8
    bound = (1 + 4 * np.sqrt(5 * 4) / 1) * 1.0
    assert np.linalg.norm(H - f.dense(), 2) <= bound
    assert np.allclose(f.lambdas, [10, 5], atol=1e-3)


def test_scaled_identity_operator():
    f = randomized_eig(MatrixOperator(np.zeros((6, 6)), shift=0.1), 3, 2, SeededRng(1))
    assert np.allclose(f.lambdas, 0.1, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_exact_rank_recovery(seed, rank):
    rng = SeededRng(seed)
    d = 30
    B = rng.normal((d, rank))
    H = B @ np.diag(rng.normal(rank) * 3) @ B.T
    f = randomized_eig(MatrixOperator(H), 6, 4, rng)
    assert np.linalg.norm(H - f.dense(), 2) <= 1e-8 * max(np.linalg.norm(H, 2), 1e-300)
    assert np.max(np.abs(f.U.T @ f.U - np.eye(6))) <= 1e-10


def test_randomized_eig_is_deterministic():
    H = np.diag(np.geomspace(1, 1e-4, 20))
    a = randomized_eig(MatrixOperator(H), 4, 3, SeededRng(5))
    b = randomized_eig(MatrixOperator(H), 4, 3, SeededRng(5))
    assert np.array_equal(a.U, b.U) and np.array_equal(a.lambdas, b.lambdas)


def test_randomized_eig_argument_checks():
    op = MatrixOperator(np.eye(5))
    for r, p in [(0, 2), (4, 2), (2, 1)]:
        with pytest.raises(ConfigError):
            randomized_eig(op, r, p, SeededRng(0))
    # p < 2 is fine when the sketch spans the space
    f = randomized_eig(op, 4, 1, SeededRng(0))
    assert np.allclose(f.lambdas, 1)


def test_hessian_operator_counts_applications(quad):
    op = HessianOperator(quad, np.zeros(quad.dim), quad.train.all())
    op.apply(np.eye(quad.dim)[:, :3])
    op(np.ones(quad.dim))
    assert op.applications == 4
    with pytest.raises(DimensionError):
        op.apply(np.ones(quad.dim + 1))


def test_smw_empty_factor_is_scaled_gradient():
    g = np.array([1.0, -2.0, 0.5])
    f = LowRankFactor(np.zeros((3, 0)), np.zeros(0))
    assert np.allclose(smw_solve(f, 0.5, g), -g / 0.5)


def test_smw_hand_computed_2x2():
    f = LowRankFactor(np.eye(2), [2.0, -1.0])
    p = smw_solve(f, 1.0, np.array([3.0, 3.0]), flip=True)
    assert np.allclose(p, [-1.0, -1.5], atol=1e-12)


def test_smw_dense_residual_unflipped():
    rng = SeededRng(2)
    f = _random_factor(rng, 40, 8)
    g = rng.normal(40)
    p = smw_solve(f, 0.1, g, flip=False)
    M = f.dense() + 0.1 * np.eye(40)
    assert np.linalg.norm(M @ p + g) <= 1e-10 * np.linalg.norm(g)


@pytest.mark.parametrize("flip", [False, True])
def test_smw_matches_dense_solves(flip):
    rng = SeededRng(3)
    for _ in range(30):
        d = int(rng.integers(2, 51))
        r = int(rng.integers(1, min(10, d) + 1))
        f = _random_factor(rng, d, r)
        g = rng.normal(d)
        gamma = float(rng.uniform() + 0.05)
        ref = _dense_step(f, gamma, g, flip)
        assert np.linalg.norm(smw_solve(f, gamma, g, flip=flip) - ref) <= 1e-10 * np.linalg.norm(ref)


@given(st.integers(0, 10_000))
def test_smw_interpolation_property(seed):
    rng = SeededRng(seed)
    f = _random_factor(rng, 12, 4)
    gamma = 0.3
    z = rng.normal(12)
    g_perp = z - f.U @ (f.U.T @ z)
    assert np.allclose(smw_solve(f, gamma, g_perp), -g_perp / gamma, atol=1e-12)
    for i in range(f.r):
        u = f.U[:, i]
        expected = -u / (abs(f.lambdas[i]) + gamma)
        assert np.allclose(smw_solve(f, gamma, u), expected, atol=1e-12)


def test_smw_gamma_rules():
    f = LowRankFactor(np.eye(2), [2.0, -1.0])
    # full rank: gamma = 0 is exact Newton
    assert np.allclose(smw_solve(f, 0.0, np.array([2.0, 1.0]), flip=False), [-1.0, 1.0])
    part = LowRankFactor(np.eye(3)[:, :2], [2.0, -1.0])
    with pytest.raises(ConfigError):
        smw_solve(part, 0.0, np.ones(3))
    with pytest.raises(RegularizationError) as err:
        smw_solve(f, 1.0, np.ones(2), flip=False)
    assert err.value.eigenvalue == -1.0


def test_flip_spectrum_rules():
    f = LowRankFactor(np.eye(3), [3.0, -2.0, 1.0])
    assert np.allclose(flip_spectrum(f).lambdas, [3, 2, 1])
    pos = LowRankFactor(np.eye(2), [2.0, 1.0])
    assert np.array_equal(flip_spectrum(pos).lambdas, pos.lambdas)
    assert np.array_equal(flip_spectrum(flip_spectrum(f)).lambdas, flip_spectrum(f).lambdas)


def test_min_eig_estimate():
    assert min_eig_estimate(LowRankFactor(np.eye(3), [5.0, -3.0, 1.0])) == -3.0
    rng = SeededRng(0)
    B = rng.normal((8, 8))
    f = randomized_eig(MatrixOperator(B @ B.T), 4, 3, rng)
    assert min_eig_estimate(f) >= 0
    m = make_saddle_problem("indefinite-quadratic")
    f = randomized_eig(HessianOperator(m, np.zeros(2), m.train.all()), 2, 0, rng)
    assert min_eig_estimate(f) == pytest.approx(-1.0, abs=1e-8)


def test_factor_validation_and_rows():
    with pytest.raises(ConfigError):
        LowRankFactor(np.eye(2), [1.0, 3.0])
    with pytest.raises(DimensionError):
        LowRankFactor(np.eye(3), [1.0, 0.5])
    rows = spectrum_rows(4, LowRankFactor(np.eye(2), [2.0, -1.0]))
    assert rows == [(4, 0, 2.0), (4, 1, -1.0)]
