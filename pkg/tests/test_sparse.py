import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narx_fusion.core import EmptySelectionError, FeatureDescriptor, InsufficientDataError, NarxFusionError, RankDeficiencyError, TimeSeries
from narx_fusion.lifting import RegressionProblem, linear_descriptors, regression_block, stack
from narx_fusion.sparse import (
    CvReport,
    ElasticNetFit,
    contiguous_folds,
    coordinate_descent,
    cross_validate,
    elastic_net_objective,
    elastic_net_path,
    fit_at_lambda,
    kkt_residuals,
    lambda_path,
    refit_ols,
    select_features,
    standardize,
)

seeds = st.integers(0, 2**32 - 1)


def random_problem(seed, n=50, p=10, unit_norm=False):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, p))
    if unit_norm:
        Z /= np.linalg.norm(Z, axis=0)
    beta = rng.normal(size=p) * (rng.random(p) < 0.5)
    Y = Z @ beta + 0.1 * rng.normal(size=n)
    return Y, Z


def sparse_linear_problem(n_ops=2, n=200, seed=0, amplitude=1.0):
    # y_k = 0.6 y_{k-1} + 0.3 u_{k-1} + 0.2 in a dictionary of lagged outputs and inputs
    rng = np.random.default_rng(seed)
    blocks = []
    for i in range(n_ops):
        u = amplitude * rng.normal(size=n) + i
        y = np.zeros(n)
        for k in range(1, n):
            y[k] = 0.6 * y[k - 1] + 0.3 * u[k - 1] + 0.2
        blocks.append(regression_block(TimeSeries(u=u, y=y), 2, 2, 1, i))
    return stack(blocks)


# standardize

def test_standardize_three_values():
    st_ = standardize(np.array([[1.0], [2.0], [3.0]]))
    assert st_.mean[0] == pytest.approx(2.0)
    assert st_.scale[0] == pytest.approx(np.sqrt(2.0 / 3.0))
    np.testing.assert_allclose(st_.Z_std[:, 0], [-1.224744871, 0.0, 1.224744871], atol=1e-9)


@given(seeds)
def test_standardize_idempotent(seed):
    Z = np.random.default_rng(seed).normal(size=(30, 4)) * 5 + 2
    once = standardize(Z).Z_std
    np.testing.assert_allclose(standardize(once).Z_std, once, atol=1e-12)


def test_standardize_flags_constant_and_keeps_intercept():
    Z = np.column_stack([np.ones(5), np.full(5, 3.0), np.arange(5.0)])
    st_ = standardize(Z, intercept_index=0)
    assert list(st_.excluded) == [False, True, False]
    assert list(st_.penalized) == [False, False, True]
    np.testing.assert_array_equal(st_.Z_std[:, 0], 1.0)
    np.testing.assert_array_equal(st_.Z_std[:, 1], 0.0)


@given(seeds)
def test_standardization_to_raw_preserves_predictions(seed):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.ones(20), rng.normal(size=(20, 3)) * [1, 10, 0.1] + 4])
    st_ = standardize(Z, 0)
    b = rng.normal(size=4)
    np.testing.assert_allclose(Z @ st_.to_raw(b), st_.Z_std @ b, atol=1e-9)


# coordinate descent

@given(seeds)
def test_cd_lambda_zero_is_ols(seed):
    Y, Z = random_problem(seed)
    fit = coordinate_descent(Y, Z, 0.0, 0.5, tol=1e-12)
    ols = np.linalg.lstsq(Z, Y, rcond=None)[0]
    np.testing.assert_allclose(fit.beta, ols, atol=1e-6)


@given(seeds, st.floats(0.01, 10.0))
def test_cd_small_gamma_matches_ridge(seed, lam):
    Y, Z = random_problem(seed)
    gamma = 1e-6
    fit = coordinate_descent(Y, Z, lam, gamma, tol=1e-12)
    ridge = np.linalg.solve(Z.T @ Z + lam * (1 - gamma) * np.eye(Z.shape[1]), Z.T @ Y)
    np.testing.assert_allclose(fit.beta, ridge, atol=1e-4)


@given(st.floats(-5, 5), st.floats(0.0, 4.0), st.floats(0.05, 0.95))
def test_cd_single_orthonormal_column(rho, lam, gamma):
    z = np.array([0.6, 0.8])
    Y = rho * z
    fit = coordinate_descent(Y, z[:, None], lam, gamma)
    expected = np.sign(rho) * max(abs(rho) - lam * gamma, 0.0) / (1 + lam * (1 - gamma))
    assert fit.beta[0] == pytest.approx(expected, abs=1e-12)


@given(seeds, st.floats(0.05, 0.95), st.floats(1e-3, 1.0))
def test_cd_kkt(seed, gamma, frac):
    Y, Z = random_problem(seed, unit_norm=True)
    tol = 1e-8
    lam = frac * lambda_path(Y, Z, gamma, 2)[0]
    fit = coordinate_descent(Y, Z, lam, gamma, tol=tol)
    assert fit.converged
    assert fit.max_delta < tol
    assert np.all(kkt_residuals(Y, Z, fit) <= 10 * tol * Z.shape[1])


@given(seeds, st.floats(0.05, 0.95), st.floats(1e-3, 1.0))
def test_cd_objective_non_increasing_per_sweep(seed, gamma, frac):
    Y, Z = random_problem(seed, n=30, p=8)
    lam = frac * lambda_path(Y, Z, gamma, 2)[0]
    beta = np.zeros(Z.shape[1])
    prev = elastic_net_objective(Y, Z, beta, lam, gamma)
    for _ in range(40):
        fit = coordinate_descent(Y, Z, lam, gamma, max_sweeps=1, beta0=beta)
        beta = fit.beta
        obj = elastic_net_objective(Y, Z, beta, lam, gamma)
        assert obj <= prev + 1e-12 * max(1.0, abs(prev))
        prev = obj


def test_cd_objective_trace_matches_direct_evaluation():
    Y, Z = random_problem(3)
    fit = coordinate_descent(Y, Z, 0.5, 0.5, track_objective=True)
    assert np.all(np.diff(fit.objective_trace) <= 1e-12)
    assert fit.objective_trace[-1] == pytest.approx(elastic_net_objective(Y, Z, fit.beta, 0.5, 0.5), rel=1e-10)


def test_cd_unpenalized_intercept():
    rng = np.random.default_rng(1)
    Z = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
    Y = 5.0 + 0.01 * rng.normal(size=40)
    fit = coordinate_descent(Y, Z, 1e3, 0.5, penalized=[False, True, True])
    assert fit.beta[0] == pytest.approx(Y.mean(), abs=0.05)
    assert np.all(fit.beta[1:] == 0.0)


def test_cd_rejects_bad_arguments():
    Y, Z = random_problem(0)
    with pytest.raises(ValueError):
        coordinate_descent(Y, Z, -1.0, 0.5)
    with pytest.raises(ValueError):
        coordinate_descent(Y, Z, 1.0, 1.0)


def test_cd_reports_non_finite_column():
    Y, Z = random_problem(0)
    Z[3, 4] = np.inf
    with pytest.raises(NarxFusionError, match="column"):
        coordinate_descent(Y, Z, 0.1, 0.5)


def test_cd_max_sweeps_reports_unconverged():
    Y, Z = random_problem(0)
    fit = coordinate_descent(Y, Z, 1e-3, 0.5, max_sweeps=1)
    assert not fit.converged
    assert fit.n_iter == 1


# lambda path

@given(seeds, st.floats(0.05, 0.95))
def test_lambda_max_zeros_everything(seed, gamma):
    Y, Z = random_problem(seed)
    lam_max = lambda_path(Y, Z, gamma, 10)[0]
    assert np.all(coordinate_descent(Y, Z, lam_max, gamma).beta == 0.0)
    assert np.any(coordinate_descent(Y, Z, 0.99 * lam_max, gamma).beta != 0.0)


def test_lambda_path_endpoints_and_scaling():
    Y, Z = random_problem(2)
    grid = lambda_path(Y, Z, 0.5, 2)
    assert grid[1] == pytest.approx(grid[0] * 1e-4)
    assert lambda_path(2 * Y, Z, 0.5, 2)[0] == pytest.approx(2 * grid[0])
    full = lambda_path(Y, Z, 0.5)
    assert full.size == 100
    assert np.all(np.diff(full) < 0)


def test_lambda_path_degenerate():
    _, Z = random_problem(2)
    np.testing.assert_array_equal(lambda_path(np.zeros(50), Z, 0.5, 10), [0.0])
    with pytest.raises(ValueError):
        lambda_path(np.ones(50), Z, 0.5, 1)


def test_lambda_path_ignores_intercept():
    rng = np.random.default_rng(0)
    Z = np.column_stack([np.ones(30), rng.normal(size=(30, 3))])
    Y = 10.0 + Z[:, 1]
    pen = [False, True, True, True]
    lam_max = lambda_path(Y, Z, 0.5, 5, penalized=pen)[0]
    fit = coordinate_descent(Y, Z, lam_max, 0.5, penalized=pen)
    assert np.all(fit.beta[1:] == 0.0)
    assert fit.beta[0] == pytest.approx(Y.mean())


def test_warm_started_path_matches_cold_fits():
    Y, Z = random_problem(5)
    grid = lambda_path(Y, Z, 0.5, 8)
    for warm, lam in zip(elastic_net_path(Y, Z, grid, 0.5, tol=1e-12), grid):
        cold = coordinate_descent(Y, Z, lam, 0.5, tol=1e-12)
        np.testing.assert_allclose(warm.beta, cold.beta, atol=1e-8)


# cross-validation

def block_problem(sizes):
    Y = np.arange(sum(sizes), dtype=float)
    Z = np.column_stack([np.ones_like(Y), np.sin(Y)])
    prov = np.repeat(np.arange(len(sizes)), sizes)
    return RegressionProblem(Y, Z, (FeatureDescriptor.intercept(), linear_descriptors(1, 1)[0]), prov)


def test_two_folds_of_ten_rows():
    folds = contiguous_folds(block_problem([10, 10]), 2)
    np.testing.assert_array_equal(folds[0], [0, 1, 2, 3, 4, 10, 11, 12, 13, 14])
    np.testing.assert_array_equal(folds[1], [5, 6, 7, 8, 9, 15, 16, 17, 18, 19])


@given(st.lists(st.integers(2, 40), min_size=1, max_size=4), st.integers(2, 6))
def test_fold_arithmetic(sizes, k):
    prob = block_problem(sizes)
    if min(sizes) < k:
        with pytest.raises(InsufficientDataError):
            contiguous_folds(prob, k)
        return
    folds = contiguous_folds(prob, k)
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(sum(sizes)))
    for rows, n in zip(prob.block_rows(), sizes):
        parts = [np.intersect1d(f, rows) for f in folds]
        counts = [p.size for p in parts]
        assert max(counts) - min(counts) <= 1
        assert all(np.all(np.diff(p) == 1) for p in parts)
        assert sum(counts) == n


def test_cv_realizable_case():
    # excitation at the few-percent scale used for local experiments
    prob = sparse_linear_problem(amplitude=0.05)
    cv = cross_validate(prob, 0.5, 3)
    assert cv.mse_mean[cv.chosen_index] < 1e-8
    assert cv.chosen_lambda in cv.lambdas
    assert cv.mse_folds.shape == (3, 100)


@pytest.mark.parametrize("amplitude", [0.05, 1.0, 20.0])
def test_cv_realizable_error_is_at_shrinkage_floor(amplitude):
    # the smallest grid point is 1e-4 lambda_max, so the residual bias is of order
    # (1e-4)^2 relative to the signal variance whatever the units
    prob = sparse_linear_problem(amplitude=amplitude)
    cv = cross_validate(prob, 0.5, 3)
    assert cv.mse_mean[cv.chosen_index] / prob.Y.var() < 1e-6
    assert cv.chosen_index == cv.lambdas.size - 1


def test_cv_ties_prefer_larger_lambda():
    prob = sparse_linear_problem()
    zero = RegressionProblem(np.zeros_like(prob.Y), prob.Z, prob.descriptors, prob.provenance)
    cv = cross_validate(zero, 0.5, 3, grid=[3.0, 2.0, 1.0])
    assert cv.chosen_index == 0


def test_cv_report_round_trip(tmp_path):
    cv = cross_validate(sparse_linear_problem(), 0.5, 2, grid_size=5)
    back = CvReport.from_dict(json.loads(cv.to_json()))
    np.testing.assert_array_equal(back.lambdas, cv.lambdas)
    np.testing.assert_array_equal(back.mse_folds, cv.mse_folds)
    assert back.chosen_index == cv.chosen_index
    assert back.folds == cv.folds
    cv.to_csv(tmp_path / "cv.csv")
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "lambda,mse_mean,mse_std,fold_0,fold_1"
    assert len(lines) == 6


# selection and refit

def test_select_intercept_only_is_empty():
    fit = ElasticNetFit(np.array([1.0, 0.0, 0.0]), 1.0, 0.5, 1, True)
    desc = [FeatureDescriptor.intercept()] + linear_descriptors(1, 1)
    with pytest.raises(EmptySelectionError):
        select_features(fit, desc)


def test_select_epsilon_zero_keeps_nonzero():
    fit = ElasticNetFit(np.array([0.0, 1e-12, 0.0, -2.0]), 1.0, 0.5, 1, True)
    desc = [FeatureDescriptor.intercept()] + linear_descriptors(2, 1)
    names = [d.name for d in select_features(fit, desc, 0.0)]
    assert names == ["1", "y[k-1]", "u[k-1]"]
    assert [d.name for d in select_features(fit, desc)] == ["1", "u[k-1]"]


def test_select_warns_when_unconverged():
    fit = ElasticNetFit(np.array([0.0, 1.0]), 1.0, 0.5, 5, False)
    with pytest.warns(RuntimeWarning):
        select_features(fit, [FeatureDescriptor.intercept(), linear_descriptors(1, 1)[0]])


def test_refit_single_column():
    z = np.linspace(-1, 2, 20)
    ols = refit_ols(3 * z, z[:, None])
    assert ols.beta[0] == pytest.approx(3.0)
    assert ols.residual_norm < 1e-12


def test_refit_duplicate_column():
    z = np.linspace(-1, 2, 20)
    with pytest.raises(RankDeficiencyError):
        refit_ols(z, np.column_stack([z, z]))


@given(seeds, st.floats(0.1, 0.9), st.floats(0.01, 0.5))
def test_refit_dominance(seed, gamma, frac):
    Y, Z = random_problem(seed)
    lam = frac * lambda_path(Y, Z, gamma, 2)[0]
    fit = coordinate_descent(Y, Z, lam, gamma)
    support = np.flatnonzero(fit.beta)
    if support.size == 0:
        return
    Zf = Z[:, support]
    ols = refit_ols(Y, Zf)
    shrunk = np.sum((Y - Zf @ fit.beta[support]) ** 2)
    assert ols.residual_norm**2 <= shrunk * (1 + 1e-12)


def _selected(problem):
    cv = cross_validate(problem, 0.5, 3, grid_size=30)
    fit, _ = fit_at_lambda(problem, 0.5, cv.lambdas, cv.chosen_lambda)
    return {d.name for d in select_features(fit, problem.descriptors)}


@settings(max_examples=8)
@given(st.integers(1, 4), st.floats(0.01, 100.0))
def test_selection_invariant_to_column_scaling(col, factor):
    prob = sparse_linear_problem()
    Z = prob.Z.copy()
    Z[:, col] *= factor
    scaled = RegressionProblem(prob.Y, Z, prob.descriptors, prob.provenance)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert _selected(scaled) == _selected(prob)
