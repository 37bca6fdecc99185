import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seatvc import mixed_model as mm
from seatvc.spline_basis import BasisSpec, basis_matrix


def dense_neg2_reml(X, Zs, y, lambdas):
    # Marginal-covariance form: V = I + sum Z Z' / lambda, sigma^2 profiled out.
    n, p = X.shape
    V = np.eye(n)
    for Z, lam in zip(Zs, lambdas):
        V += Z @ Z.T / lam
    Vi = np.linalg.inv(V)
    XtViX = X.T @ Vi @ X
    beta = np.linalg.solve(XtViX, X.T @ Vi @ y)
    r = y - X @ beta
    dof = n - p
    s2 = r @ Vi @ r / dof
    return (dof * np.log(s2) + np.linalg.slogdet(V)[1] + np.linalg.slogdet(XtViX)[1]
            + dof * (1 + np.log(2 * np.pi)))


def spline_problem(rng, n=300, q=2, H=15, amp=1.0, noise=0.3):
    t = np.sort(rng.uniform(0, 1, n))
    spec = BasisSpec(order_q=q, knots=np.linspace(0, 1, H + 2)[1:-1])
    B = basis_matrix(t, spec)
    y = amp * np.sin(2 * np.pi * t) + noise * rng.normal(size=n)
    return mm.PenalizedDesign(B[:, : q + 1], [B[:, q + 1:]], y)


def random_design(rng, n=40, p=3, sizes=(4, 3)):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    Zs = [rng.normal(size=(n, h)) for h in sizes]
    y = rng.normal(size=n)
    return mm.PenalizedDesign(X, Zs, y)


def test_fixed_lambda_matches_augmented_ridge(rng):
    d = random_design(rng)
    lambdas = [2.5, 0.3]
    fixed, rand = mm.fit_penalized_fixed_lambda(d, lambdas)
    # Independent oracle: least squares on the augmented system.
    W = d.full_matrix()
    pen = np.concatenate([np.zeros(d.p)] + [np.full(h, np.sqrt(l)) for h, l in zip(d.block_sizes, lambdas)])
    A = np.vstack([W, np.diag(pen)[d.p:]])
    b = np.concatenate([d.response, np.zeros(W.shape[1] - d.p)])
    oracle = np.linalg.lstsq(A, b, rcond=None)[0]
    np.testing.assert_allclose(np.concatenate([fixed, *rand]), oracle, rtol=1e-9, atol=1e-10)
    resid = A @ oracle - b
    grad = A.T @ resid
    assert np.linalg.norm(grad) <= 1e-8 * np.linalg.norm(d.response) * np.linalg.norm(A)


def test_huge_penalty_reduces_to_ols(rng):
    d = random_design(rng)
    fixed, rand = mm.fit_penalized_fixed_lambda(d, [1e12, 1e12])
    ols = np.linalg.lstsq(d.fixed_matrix, d.response, rcond=None)[0]
    assert np.max(np.abs(fixed - ols)) <= 1e-4
    for u in rand:
        assert np.max(np.abs(u)) <= 1e-6


def test_no_random_blocks_is_ols(rng):
    d = random_design(rng, sizes=())
    fit = mm.fit_reml(d)
    ols = np.linalg.lstsq(d.fixed_matrix, d.response, rcond=None)[0]
    np.testing.assert_allclose(fit.fixed_coefficients, ols, atol=1e-10)
    assert fit.lambdas.size == 0


def test_noiseless_fixed_effects_recovered(rng):
    n = 60
    X = np.column_stack([np.ones(n), np.linspace(0, 1, n)])
    Z = rng.normal(size=(n, 5))
    y = X @ np.array([1.5, -2.0])
    fixed, rand = mm.fit_penalized_fixed_lambda(mm.PenalizedDesign(X, [Z], y), [1.0])
    np.testing.assert_allclose(fixed, [1.5, -2.0], atol=1e-8)
    np.testing.assert_allclose(rand[0], 0.0, atol=1e-8)


def test_objective_matches_dense_formula(rng):
    d = random_design(rng)
    for lambdas in ([1.0, 1.0], [0.05, 30.0], [1e3, 1e-2]):
        got = mm.neg2_reml(d, lambdas)
        want = dense_neg2_reml(d.fixed_matrix, d.random_blocks, d.response, lambdas)
        assert got == pytest.approx(want, rel=1e-8, abs=1e-8)


def test_reml_optimum_matches_grid_oracle(rng):
    d = spline_problem(rng)
    fit = mm.fit_reml(d)
    grid = np.arange(-8, 12.0001, 0.01)
    X, Zs, y = d.fixed_matrix, d.random_blocks, d.response
    vals = [dense_neg2_reml(X, Zs, y, [10 ** r]) for r in grid[::10]]
    coarse = grid[::10][int(np.argmin(vals))]
    fine = grid[np.abs(grid - coarse) <= 0.1]
    best = fine[int(np.argmin([dense_neg2_reml(X, Zs, y, [10 ** r]) for r in fine]))]
    assert abs(np.log10(fit.lambdas[0]) - best) <= 0.02
    assert fit.neg2_res_log_likelihood <= dense_neg2_reml(X, Zs, y, [10 ** best]) + 1e-6
    assert not fit.boundary_flags


def test_fit_metrics_counts():
    class Stub:
        neg2_res_log_likelihood = 100.0
        effective_param_count = 5
        n_obs = float(np.exp(10.0))

    stats = mm.fit_metrics(Stub())
    assert stats["aic"] == pytest.approx(110.0)
    assert stats["bic"] == pytest.approx(150.0)


def test_param_count_convention(rng):
    d = random_design(rng)
    fit = mm.fit_reml(d)
    assert fit.effective_param_count == d.p + 2 + 1
    assert fit.aic == pytest.approx(fit.neg2_res_log_likelihood + 2 * fit.effective_param_count)


def test_nested_model_not_worse(rng):
    # Adding a random block can only lower the optimum (its penalty may go to the upper bound).
    d_small = spline_problem(rng, n=200)
    extra = rng.normal(size=(d_small.n, 4))
    d_big = mm.PenalizedDesign(d_small.fixed_matrix, d_small.random_blocks + [extra], d_small.response)
    small = mm.fit_reml(d_small)
    big = mm.fit_reml(d_big)
    assert big.neg2_res_log_likelihood <= small.neg2_res_log_likelihood + 1e-6


def test_deterministic(rng):
    d = spline_problem(rng, n=150)
    a, b = mm.fit_reml(d), mm.fit_reml(d)
    np.testing.assert_array_equal(a.coefficients, b.coefficients)
    np.testing.assert_array_equal(a.lambdas, b.lambdas)


def test_row_permutation_invariance(rng):
    d = spline_problem(rng, n=150)
    perm = rng.permutation(d.n)
    dp = mm.PenalizedDesign(d.fixed_matrix[perm], [Z[perm] for Z in d.random_blocks], d.response[perm])
    a, b = mm.fit_reml(d), mm.fit_reml(dp)
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-6)
    np.testing.assert_allclose(a.fitted[perm], b.fitted, atol=1e-6)
    assert a.neg2_res_log_likelihood == pytest.approx(b.neg2_res_log_likelihood, abs=1e-8)


def test_objective_trace_monotone(rng):
    fit = mm.fit_reml(spline_problem(rng, n=200))
    trace = np.asarray(fit.objective_trace)
    assert np.all(np.diff(trace) <= 1e-8 * np.maximum(1, np.abs(trace[1:])))
    assert fit.converged


def test_boundary_flag_on_flat_signal(rng):
    n = 200
    t = np.linspace(0, 1, n)
    spec = BasisSpec(order_q=1, knots=[0.25, 0.5, 0.75])
    B = basis_matrix(t, spec)
    y = 1 + 2 * t + 0.01 * rng.normal(size=n)
    fit = mm.fit_reml(mm.PenalizedDesign(B[:, :2], [B[:, 2:]], y))
    if np.log10(fit.lambdas[0]) >= mm.LOG10_LAMBDA_BOUNDS[1] - 1e-6:
        assert fit.boundary_flags


def test_errors(rng):
    n = 30
    X = np.column_stack([np.ones(n), np.ones(n)])
    with pytest.raises(mm.RankDeficientError):
        mm.fit_reml(mm.PenalizedDesign(X, [rng.normal(size=(n, 2))], rng.normal(size=n)))
    d = random_design(rng)
    with pytest.raises(ValueError):
        mm.fit_penalized_fixed_lambda(d, [1.0])
    with pytest.raises(ValueError):
        mm.fit_penalized_fixed_lambda(d, [1.0, -1.0])
    with pytest.raises(mm.MixedModelError):
        mm.fit_reml(random_design(rng, n=4, p=3, sizes=(2,)))


def test_covariance_is_sigma2_cinv(rng):
    d = random_design(rng)
    fit = mm.fit_at_lambdas(d, [1.0, 2.0])
    W = d.full_matrix()
    C = W.T @ W + np.diag(np.concatenate([np.zeros(d.p), np.full(4, 1.0), np.full(3, 2.0)]))
    np.testing.assert_allclose(fit.covariance, fit.residual_variance * np.linalg.inv(C), rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_objective_dense_agreement_property(seed, r1, r2):
    d = random_design(np.random.default_rng(seed), n=25)
    lambdas = [10 ** r1, 10 ** r2]
    assert mm.neg2_reml(d, lambdas) == pytest.approx(
        dense_neg2_reml(d.fixed_matrix, d.random_blocks, d.response, lambdas), rel=1e-7, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-4, 4))
def test_penalty_shrinks_random_norm(seed, r):
    d = random_design(np.random.default_rng(seed), n=30, sizes=(5,))
    _, small = mm.fit_penalized_fixed_lambda(d, [10 ** r])
    _, large = mm.fit_penalized_fixed_lambda(d, [10 ** (r + 1)])
    assert np.linalg.norm(large[0]) <= np.linalg.norm(small[0]) + 1e-10
