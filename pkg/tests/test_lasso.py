import logging

import numpy as np
import pytest
from scipy.special import expit

from modules import config, lasso
from modules.config import CvConfig
from modules.errors import DataError, DegenerateResponseError
from modules.lasso import BINOMIAL, GAUSSIAN, DesignMatrix


def _gaussian_problem(rng, n=60, p=40, k=4):
    x = rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[:k] = rng.uniform(0.5, 2.0, k) * rng.choice([-1, 1], k)
    return x, x @ beta + rng.standard_normal(n)


def _binomial_problem(rng, n=80, p=30):
    x = rng.standard_normal((n, p))
    eta = 1.2 * x[:, 0] - 0.8 * x[:, 1]
    y = (rng.uniform(size=n) < expit(eta)).astype(float)
    if y.min() == y.max():
        y[0] = 1.0 - y[0]
    return x, y


def _kkt_residual(x, y, fit):
    design = DesignMatrix.from_array(x)
    xs = design.standardized()
    pred = lasso.predict(fit, x, "response")
    grad = xs.T @ (y - pred) / y.shape[0]
    beta_std = fit.coefficients * design.column_sds
    lam = fit.lambda_
    active = beta_std != 0
    residual = np.zeros_like(grad)
    residual[active] = np.abs(grad[active] - lam * np.sign(beta_std[active]))
    residual[~active] = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    return max(float(residual.max()), abs(float(np.mean(y - pred))))


def test_soft_threshold_values():
    assert lasso.soft_threshold(3.0, 1.0) == 2.0
    assert lasso.soft_threshold(-3.0, 1.0) == -2.0
    assert lasso.soft_threshold(0.5, 1.0) == 0.0
    np.testing.assert_array_equal(lasso.soft_threshold(np.array([2.0, -0.2]), 0.5), [1.5, 0.0])


def test_soft_threshold_rejects_negative_gamma():
    with pytest.raises(ValueError):
        lasso.soft_threshold(1.0, -0.1)


def test_univariate_closed_form(rng):
    x = rng.standard_normal(50)
    y = 2.0 * x + rng.standard_normal(50)
    sd = x.std()
    xs = (x - x.mean()) / sd
    lam = 0.3
    expected = lasso.soft_threshold(float(xs @ (y - y.mean())) / 50, lam) / sd
    fit = lasso.fit_lasso(x, y, GAUSSIAN, lam)
    assert fit.coefficients[0] == pytest.approx(expected, abs=1e-8)
    assert fit.intercept == pytest.approx(y.mean() - expected * x.mean(), abs=1e-8)


@pytest.mark.parametrize("family", [GAUSSIAN, BINOMIAL])
def test_lambda_max_gives_zero_solution(rng, family):
    x, y = _gaussian_problem(rng) if family == GAUSSIAN else _binomial_problem(rng)
    lam_max = lasso.lambda_path(x, y, family, n_lambda=5)[0]
    for lam in (lam_max, 2 * lam_max):
        fit = lasso.fit_lasso(x, y, family, lam)
        assert fit.n_nonzero == 0


def _assert_kkt(rng, family, count, max_p):
    for _ in range(count):
        p = int(rng.integers(5, max_p + 1))
        if family == GAUSSIAN:
            n = int(rng.integers(20, 201))
            x, y = _gaussian_problem(rng, n, p, k=4)
            shrink = rng.uniform(0.05, 0.8)
        else:
            n = int(rng.integers(60, 201))
            x, y = _binomial_problem(rng, n, p)
            shrink = rng.uniform(0.3, 0.8)
        lam = lasso.lambda_path(x, y, family, n_lambda=5)[0] * shrink
        fit = lasso.fit_lasso(x, y, family, lam, tol=1e-10, max_updates=10_000_000)
        assert fit.converged
        assert _kkt_residual(x, y, fit) <= 1e-6


def test_kkt_gaussian(rng):
    _assert_kkt(rng, GAUSSIAN, 25, 200)


def test_kkt_binomial(rng):
    _assert_kkt(rng, BINOMIAL, 15, 120)


@pytest.mark.slow
@pytest.mark.parametrize("family", [GAUSSIAN, BINOMIAL])
def test_kkt_full_suite(rng, family):
    _assert_kkt(rng, family, 100, 500)


def test_scale_equivariance(rng):
    x, y = _gaussian_problem(rng)
    lam = 0.1
    base = lasso.fit_lasso(x, y, GAUSSIAN, lam, tol=1e-12)
    scaled = lasso.fit_lasso(x, 3.0 * y, GAUSSIAN, 3.0 * lam, tol=1e-12)
    np.testing.assert_allclose(scaled.coefficients, 3.0 * base.coefficients, atol=1e-6)
    assert scaled.intercept == pytest.approx(3.0 * base.intercept, abs=1e-6)


@pytest.mark.parametrize("family", [GAUSSIAN, BINOMIAL])
def test_column_scaling_leaves_predictions_unchanged(rng, family):
    x, y = _gaussian_problem(rng) if family == GAUSSIAN else _binomial_problem(rng)
    lam = 0.3 * lasso.lambda_path(x, y, family, n_lambda=5)[0]
    stretched = x.copy()
    stretched[:, 0] *= 7.5
    base = lasso.fit_lasso(x, y, family, lam, tol=1e-12)
    other = lasso.fit_lasso(stretched, y, family, lam, tol=1e-12)
    np.testing.assert_allclose(lasso.predict(other, stretched), lasso.predict(base, x), atol=1e-8)
    assert other.coefficients[0] == pytest.approx(base.coefficients[0] / 7.5, abs=1e-8)
    np.testing.assert_allclose(other.coefficients[1:], base.coefficients[1:], atol=1e-8)


def test_lambda_max_formula(rng):
    x, y = _gaussian_problem(rng, n=70, p=25)
    xs = (x - x.mean(axis=0)) / x.std(axis=0)
    expected = np.max(np.abs(xs.T @ (y - y.mean()))) / 70
    assert lasso.lambda_path(x, y, GAUSSIAN, n_lambda=10)[0] == pytest.approx(expected, rel=1e-12)


def test_constant_column_gets_zero(rng):
    x, y = _gaussian_problem(rng, p=5)
    x[:, 2] = 4.0
    design = DesignMatrix.from_array(x)
    assert design.constant_columns[2]
    fit = lasso.fit_lasso(x, y, GAUSSIAN, 0.01)
    assert fit.coefficients[2] == 0.0


def test_unpenalized_column_stays_in_model(rng):
    x, y = _gaussian_problem(rng, p=6)
    pf = np.ones(6)
    pf[5] = 0.0
    y = y + 0.5 * x[:, 5]
    lam = 1.01 * lasso.lambda_path(x, y, GAUSSIAN, n_lambda=5, penalty_factors=pf)[0]
    fit = lasso.fit_lasso(x, y, GAUSSIAN, lam, pf)
    assert list(fit.support) == [5]


def test_lambda_path_shape(rng):
    x, y = _gaussian_problem(rng, n=60, p=40)
    path = lasso.lambda_path(x, y, GAUSSIAN, n_lambda=10)
    assert path.shape == (10,)
    assert np.all(np.diff(path) < 0)
    assert path[-1] / path[0] == pytest.approx(1e-4)
    wide = lasso.lambda_path(x[:30], y[:30], GAUSSIAN, n_lambda=10)
    assert wide[-1] / wide[0] == pytest.approx(0.01)


def test_lambda_path_degenerate_responses(rng):
    x = rng.standard_normal((20, 3))
    with pytest.raises(DegenerateResponseError):
        lasso.lambda_path(x, np.full(20, 2.0), GAUSSIAN)
    with pytest.raises(DegenerateResponseError):
        lasso.lambda_path(x, np.ones(20), BINOMIAL)


def test_fit_path_warm_start_matches_cold_fit(rng):
    x, y = _gaussian_problem(rng)
    grid = lasso.lambda_path(x, y, GAUSSIAN, n_lambda=8)
    path = lasso.fit_path(x, y, GAUSSIAN, grid)
    cold = lasso.fit_lasso(x, y, GAUSSIAN, path[-1].lambda_, tol=1e-10)
    np.testing.assert_allclose(path[-1].coefficients, cold.coefficients, atol=1e-4)


def test_cross_validate_is_seeded(rng):
    x, y = _gaussian_problem(rng, n=80, p=20)
    first = lasso.cross_validate(x, y, GAUSSIAN, n_folds=4, seed=11, n_lambda=15)
    again = lasso.cross_validate(x, y, GAUSSIAN, n_folds=4, seed=11, n_lambda=15)
    assert first.lambda_min == again.lambda_min
    np.testing.assert_array_equal(first.mean_cv_error, again.mean_cv_error)
    assert first.lambda_1se >= first.lambda_min
    assert first.lambda_min in first.lambda_grid
    assert first.selected_lambda == first.lambda_min


def test_cross_validate_parallel_matches_serial(rng):
    x, y = _binomial_problem(rng, n=90, p=10)
    serial = lasso.cross_validate(x, y, BINOMIAL, n_folds=3, seed=5, n_lambda=10)
    parallel = lasso.cross_validate(x, y, BINOMIAL, n_folds=3, seed=5, n_lambda=10, n_jobs=2)
    np.testing.assert_allclose(serial.mean_cv_error, parallel.mean_cv_error)


def test_cross_validate_one_se_rule(rng):
    x, y = _gaussian_problem(rng, n=80, p=20)
    cv = lasso.cross_validate(x, y, GAUSSIAN, n_folds=4, seed=2, n_lambda=15, rule="1se")
    assert cv.selected_lambda == cv.lambda_1se


def test_fit_cv_constant_response_falls_back(rng):
    x = rng.standard_normal((30, 4))
    fit, cv = lasso.fit_cv(x, np.full(30, 1.5), GAUSSIAN, CvConfig(n_folds=3, n_lambda=10), seed=0)
    assert cv is None
    assert fit.n_nonzero == 0
    assert fit.intercept == pytest.approx(1.5)


def test_fit_cv_recovers_signal(rng):
    x, y = _gaussian_problem(rng, n=150, p=30)
    fit, cv = lasso.fit_cv(x, y, GAUSSIAN, CvConfig(n_folds=5, n_lambda=30), seed=1)
    assert cv is not None
    assert set(range(4)) <= set(fit.support.tolist())


def test_predict_scales_and_dimensions(rng):
    x, y = _binomial_problem(rng)
    fit = lasso.fit_lasso(x, y, BINOMIAL, 0.02)
    prob = lasso.predict(fit, x)
    assert np.all((prob > 0) & (prob < 1))
    np.testing.assert_allclose(expit(lasso.predict(fit, x, "linear")), prob)
    with pytest.raises(DataError):
        lasso.predict(fit, x[:, :3])


def test_design_matrix_validation():
    with pytest.raises(DataError):
        DesignMatrix.from_array([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(DataError):
        DesignMatrix.from_array([[1.0, 2.0]])


def test_binomial_response_must_be_binary(rng):
    x = rng.standard_normal((10, 2))
    with pytest.raises(DataError):
        lasso.fit_lasso(x, np.arange(10.0), BINOMIAL, 0.1)


def test_fit_cv_reduces_folds_to_fit_the_data(rng, caplog):
    x, y = _gaussian_problem(rng, n=12, p=3, k=2)
    with caplog.at_level(logging.WARNING, logger="modules.lasso"):
        _, cv = lasso.fit_cv(x, y, GAUSSIAN, CvConfig(n_folds=50, n_lambda=10), seed=0)
    assert cv.n_folds == 12
    assert "using 12 folds" in caplog.text

    xb = rng.standard_normal((40, 3))
    yb = np.zeros(40)
    yb[:3] = 1.0
    _, cv = lasso.fit_cv(xb, yb, BINOMIAL, CvConfig(n_folds=10, n_lambda=10), seed=0)
    assert cv.n_folds == 3
    yb[1:3] = 0.0
    with pytest.raises(DataError, match="too small"):
        lasso.fit_cv(xb, yb, BINOMIAL, CvConfig(n_folds=10, n_lambda=10), seed=0)


def test_cross_validate_rejects_bad_fold_count(rng):
    x, y = _gaussian_problem(rng, n=12, p=3, k=2)
    with pytest.raises(DataError):
        lasso.cross_validate(x, y, GAUSSIAN, n_folds=13)
    with pytest.raises(DataError):
        lasso.cross_validate(x, y, GAUSSIAN, n_folds=1)


def test_path_stops_once_deviance_levels_off(rng):
    x, y = _gaussian_problem(rng, n=200, p=5, k=2)
    grid = lasso.lambda_path(x, y, GAUSSIAN, n_lambda=100)
    path = lasso.fit_path(x, y, GAUSSIAN, grid)
    assert config.PATH_MIN_LAMBDAS <= len(path) < 100
    last, previous = path[-1].dev_ratio, path[-2].dev_ratio
    assert last > config.PATH_DEVIANCE_STOP or last - previous < config.PATH_DEVIANCE_CHANGE_STOP * last


def test_cv_grid_and_fit_come_from_the_full_data_path(rng):
    x, y = _gaussian_problem(rng, n=100, p=20)
    cv = lasso.cross_validate(x, y, GAUSSIAN, n_folds=5, seed=3)
    assert len(cv.path) == cv.lambda_grid.shape[0]
    fit, again = lasso.fit_cv(x, y, GAUSSIAN, CvConfig(n_folds=5), seed=3)
    assert fit.lambda_ == again.selected_lambda
    np.testing.assert_array_equal(fit.coefficients, cv.path[cv.selected_index].coefficients)


def test_wide_cv_fit_converges_without_hitting_the_budget(rng, caplog):
    x = rng.standard_normal((200, 1000))
    y = x[:, :4] @ np.array([1.0, -1.0, 0.5, -0.5]) + rng.standard_normal(200)
    with caplog.at_level(logging.WARNING, logger="modules.lasso"):
        fit, cv = lasso.fit_cv(x, y, GAUSSIAN, CvConfig(n_folds=5), seed=1)
        prop, _ = lasso.fit_cv(x, (y > np.median(y)).astype(float), BINOMIAL, CvConfig(n_folds=5), seed=1)
    assert "coordinate descent hit" not in caplog.text
    assert fit.converged
    assert cv.selected_lambda > 0
    assert prop.n_nonzero < 200


@pytest.mark.slow
def test_pure_noise_cv_selects_few_covariates():
    sparse = 0
    for seed in range(20):
        noise = np.random.default_rng(seed)
        x = noise.standard_normal((200, 1000))
        y = noise.standard_normal(200)
        fit, _ = lasso.fit_cv(x, y, GAUSSIAN, CvConfig(), seed=seed)
        sparse += fit.n_nonzero <= 10
    assert sparse >= 18
