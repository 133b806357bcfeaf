# modules/lasso.py
"""
Coordinate-descent lasso for squared-error and logistic losses.

Objectives, on internally standardized columns (population sd, divisor N):

    gaussian:  (1/2N) * sum (y - b0 - x'b)^2            + lambda * sum pf_j |b_j|
    binomial:  -(1/N) * sum [y*eta - log(1 + e^eta)]    + lambda * sum pf_j |b_j|

The intercept is never penalized. Coefficients are reported on the original
covariate scale; a zero-sd column always gets coefficient 0.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit, logit
from sklearn.model_selection import KFold, StratifiedKFold

from modules import config
from modules.errors import DataError, DegenerateResponseError
from modules.seeding import sklearn_state

logger = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
BINOMIAL = "binomial"
FAMILIES = (GAUSSIAN, BINOMIAL)

# slack on the KKT entry test so lambda == lambda_max stays an all-zero fit
_KKT_SLACK = 1e-12


# -------------------------
# Domain types
# -------------------------
@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    column_means: np.ndarray
    column_sds: np.ndarray

    @classmethod
    def from_array(cls, x) -> "DesignMatrix":
        if isinstance(x, DesignMatrix):
            return x
        values = np.array(x, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError("design matrix must be two-dimensional")
        if values.shape[0] < 2:
            raise DataError("design matrix needs at least 2 rows")
        if not np.all(np.isfinite(values)):
            raise DataError("design matrix has non-finite entries")
        means = values.mean(axis=0)
        sds = values.std(axis=0)
        # exact zero for constant columns; np.std can leave rounding noise
        sds[np.ptp(values, axis=0) == 0] = 0.0
        values.setflags(write=False)
        means.setflags(write=False)
        sds.setflags(write=False)
        return cls(values, means, sds)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def constant_columns(self) -> np.ndarray:
        return self.column_sds == 0

    def standardized(self) -> np.ndarray:
        """Columns centered and scaled to unit sd; constant columns become 0."""
        usable = ~self.constant_columns
        out = np.zeros(self.values.shape, order="F")
        out[:, usable] = (self.values[:, usable] - self.column_means[usable]) / self.column_sds[usable]
        return out

    def rows(self, index) -> "DesignMatrix":
        return DesignMatrix.from_array(self.values[index])

    def columns(self, index) -> "DesignMatrix":
        return DesignMatrix.from_array(self.values[:, index])


@dataclass(frozen=True, eq=False)
class PenalizedFit:
    family: str
    intercept: float
    coefficients: np.ndarray
    lambda_: float
    converged: bool
    n_iterations: int
    dev_ratio: float = float("nan")
    message: str = ""

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coefficients))

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)


@dataclass(frozen=True, eq=False)
class CvResult:
    lambda_grid: np.ndarray
    mean_cv_error: np.ndarray
    cv_error_se: np.ndarray
    lambda_min: float
    lambda_1se: float
    selected_lambda: float
    n_folds: int
    fold_seed: int
    rule: str = "min"
    # full-data fits along lambda_grid
    path: Tuple[PenalizedFit, ...] = field(default=(), repr=False)

    @property
    def selected_index(self) -> int:
        return int(np.flatnonzero(self.lambda_grid == self.selected_lambda)[0])


# -------------------------
# Helpers
# -------------------------
def soft_threshold(z, gamma):
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("gamma must be nonnegative")
    out = np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)
    if np.ndim(out) == 0:
        return float(out) + 0.0  # turn -0.0 into 0.0
    return out


def _check_family(family: str) -> None:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")


def _check_response(response, family: str, n: int) -> np.ndarray:
    y = np.asarray(response, dtype=float).ravel()
    if y.shape[0] != n:
        raise DataError(f"response has length {y.shape[0]}, design has {n} rows")
    if not np.all(np.isfinite(y)):
        raise DataError("response has non-finite entries")
    if family == BINOMIAL:
        if not np.all((y == 0) | (y == 1)):
            raise DataError("binomial response must be 0/1")
        if y.min() == y.max():
            raise DegenerateResponseError("degenerate response")
    return y


def _penalty_factors(penalty_factors, p: int) -> np.ndarray:
    if penalty_factors is None:
        return np.ones(p)
    pf = np.asarray(penalty_factors, dtype=float).ravel()
    if pf.shape[0] != p:
        raise DataError(f"penalty_factors has length {pf.shape[0]}, expected {p}")
    if np.any(pf < 0) or not np.all(np.isfinite(pf)):
        raise DataError("penalty_factors must be finite and nonnegative")
    return pf


def _open_unit(p: np.ndarray) -> np.ndarray:
    # expit saturates to exactly 0/1 in float64 for |eta| > ~37
    return np.clip(p, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)


def _to_original_scale(x: DesignMatrix, b0: float, beta: np.ndarray) -> Tuple[float, np.ndarray]:
    coef = np.zeros_like(beta)
    usable = ~x.constant_columns
    coef[usable] = beta[usable] / x.column_sds[usable]
    intercept = b0 - float(coef @ x.column_means)
    return intercept, coef


def _deviance(y: np.ndarray, eta: np.ndarray, family: str) -> float:
    if family == GAUSSIAN:
        return float(np.sum((y - eta) ** 2))
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def _null_deviance(y: np.ndarray, family: str) -> float:
    ybar = y.mean()
    if family == GAUSSIAN:
        return float(np.sum((y - ybar) ** 2))
    return _deviance(y, np.full_like(y, logit(ybar)), family)


def _objective(y, eta, beta, lam, pf, family) -> float:
    n = y.shape[0]
    penalty = lam * float(np.sum(pf * np.abs(beta))) if lam > 0 else 0.0
    return _deviance(y, eta, family) / (2.0 * n) + penalty


# -------------------------
# Solver (standardized scale)
# -------------------------
def _coordinate_descent(xs, xv, d, z, v, thresholds, usable, beta, b0, active, tol, budget, gram=None):
    """
    Weighted coordinate descent for (1/2N) sum v_i (z_i - b0 - xs_i'beta)^2 + sum thr_j |beta_j|.

    `beta` is updated in place and `active` (a sorted list) may grow. Cycles over the
    active set with covariance updates: the gradient of the active coordinates is
    kept current through cached Gram columns xv'xs_k/N, so one coordinate update
    costs O(|active|). Every FULL_SWEEP_EVERY cycles (and once the active set
    settles) the gradient of every usable coordinate is recomputed from the residual
    and KKT violators join the set. Only coordinate updates count against `budget`.
    Returns (b0, n_updates, converged).
    """
    n = z.shape[0]
    vsum = float(v.sum()) if v is not None else float(n)
    colsum = xv.sum(axis=0) / n
    if gram is None:
        gram = {}
    updates = 0
    settled = False
    while True:
        # full sweep: vectorized gradient over all columns
        r = z - b0 - xs @ beta
        grad = xv.T @ r / n
        violators = usable & (np.abs(grad) > thresholds + _KKT_SLACK) & (beta == 0)
        violators[active] = False
        if settled and not violators.any():
            return b0, updates, True
        if updates >= budget:
            return b0, updates, False
        if violators.any():
            active[:] = sorted(set(active) | set(np.flatnonzero(violators).tolist()))
        idx = np.asarray(active, dtype=int)
        for k in idx.tolist():
            if k not in gram:
                gram[k] = xv.T @ xs[:, k] / n
        cov = np.column_stack([gram[k][idx] for k in idx.tolist()]) if idx.size else np.zeros((0, 0))
        g = grad[idx].copy()
        b = beta[idx].copy()
        da = d[idx]
        ta = thresholds[idx]
        ca = colsum[idx]
        rsum = float(r @ v) if v is not None else float(r.sum())
        settled = False
        for _ in range(config.FULL_SWEEP_EVERY):
            delta = 0.0
            for a in range(idx.size):
                bj = b[a]
                u = g[a] + da[a] * bj
                new = math.copysign(max(abs(u) - ta[a], 0.0), u) / da[a]
                if new != bj:
                    diff = new - bj
                    g -= diff * cov[:, a]
                    rsum -= diff * n * ca[a]
                    b[a] = new
                    if abs(diff) > delta:
                        delta = abs(diff)
            updates += idx.size
            shift = rsum / vsum
            if shift != 0.0:
                b0 += shift
                g -= shift * ca
                rsum = 0.0
                delta = max(delta, abs(shift))
            if delta < tol:
                settled = True
                break
            if updates >= budget:
                break
        beta[idx] = b


def _solve(x: DesignMatrix, xs, y, family, lam, pf, beta, b0, tol, max_updates, gram=None):
    """Fit at one lambda on the standardized scale. Returns (b0, beta, converged, iterations, message).

    `gram` caches gaussian Gram columns across the lambdas of one path.
    """
    n = y.shape[0]
    usable = ~x.constant_columns
    beta = beta.copy()
    beta[~usable] = 0.0
    thresholds = lam * pf
    active = sorted(set(np.flatnonzero(beta != 0).tolist()) | set(np.flatnonzero(usable & (pf == 0)).tolist()))

    if family == GAUSSIAN:
        d = np.ones(x.n_cols)
        if b0 is None:
            b0 = float(y.mean())
        b0, updates, ok = _coordinate_descent(
            xs, xs, d, y, None, thresholds, usable, beta, b0, active, tol, max_updates, gram
        )
        msg = "" if ok else f"coordinate descent hit {max_updates} updates at lambda={lam:.6g}"
        return b0, beta, ok, updates, msg

    if b0 is None:
        b0 = float(logit(y.mean()))
    clamp = config.PROBABILITY_CLAMP
    eta = b0 + xs @ beta
    obj = _objective(y, eta, beta, lam, pf, family)
    used = 0
    for it in range(1, config.MAX_IRLS_ITERATIONS + 1):
        p = np.clip(expit(eta), clamp, 1.0 - clamp)
        v = p * (1.0 - p)
        z = eta + (y - p) / v
        xv = np.asfortranarray(xs * v[:, None])
        d = (xv * xs).sum(axis=0) / n
        d[~usable] = 1.0
        cand = beta.copy()
        cand_b0, updates, inner_ok = _coordinate_descent(
            xs, xv, d, z, v, thresholds, usable, cand, b0, active, tol, max_updates - used
        )
        used += updates
        # step halving keeps the penalized deviance from increasing
        step = 1.0
        while True:
            trial_beta = beta + step * (cand - beta)
            trial_b0 = b0 + step * (cand_b0 - b0)
            trial_eta = trial_b0 + xs @ trial_beta
            trial_obj = _objective(y, trial_eta, trial_beta, lam, pf, family)
            if trial_obj <= obj + 1e-12 * max(1.0, abs(obj)) or step < 1e-3:
                break
            step *= 0.5
        change = max(abs(trial_b0 - b0), float(np.max(np.abs(trial_beta - beta), initial=0.0)))
        beta, b0, eta, obj = trial_beta, trial_b0, trial_eta, trial_obj
        if change < tol and inner_ok:
            return b0, beta, True, it, ""
        if used >= max_updates:
            return b0, beta, False, it, f"coordinate descent hit {max_updates} updates at lambda={lam:.6g}"
    return b0, beta, False, config.MAX_IRLS_ITERATIONS, (
        f"IRLS did not converge in {config.MAX_IRLS_ITERATIONS} iterations at lambda={lam:.6g}"
    )


def _finish(x, y, family, lam, b0, beta, ok, iterations, msg, null_dev, xs) -> PenalizedFit:
    intercept, coef = _to_original_scale(x, b0, beta)
    eta = b0 + xs @ beta
    dev_ratio = 1.0 - _deviance(y, eta, family) / null_dev if null_dev > 0 else float("nan")
    if not ok:
        logger.warning("lasso fit (%s) not converged: %s", family, msg)
    coef.setflags(write=False)
    return PenalizedFit(
        family=family,
        intercept=float(intercept),
        coefficients=coef,
        lambda_=float(lam),
        converged=bool(ok),
        n_iterations=int(iterations),
        dev_ratio=float(dev_ratio),
        message=msg,
    )


# -------------------------
# Public API
# -------------------------
def fit_lasso(
    x,
    response,
    family: str = GAUSSIAN,
    lambda_: float = 0.0,
    penalty_factors=None,
    warm_start: Optional[np.ndarray] = None,
    tol: float = config.LASSO_TOLERANCE,
    max_updates: int = config.MAX_COORDINATE_UPDATES,
) -> PenalizedFit:
    """Fit one lasso model at a fixed lambda. `warm_start` is on the original scale."""
    _check_family(family)
    if lambda_ < 0:
        raise ValueError("lambda must be nonnegative")
    x = DesignMatrix.from_array(x)
    y = _check_response(response, family, x.n_rows)
    pf = _penalty_factors(penalty_factors, x.n_cols)
    xs = x.standardized()
    beta = np.zeros(x.n_cols)
    if warm_start is not None:
        beta = np.asarray(warm_start, dtype=float).ravel() * x.column_sds
    b0, beta, ok, it, msg = _solve(x, xs, y, family, lambda_, pf, beta, None, tol, max_updates)
    return _finish(x, y, family, lambda_, b0, beta, ok, it, msg, _null_deviance(y, family), xs)


def _lambda_max(x: DesignMatrix, xs: np.ndarray, y: np.ndarray, family: str, pf: np.ndarray) -> float:
    usable = ~x.constant_columns
    unpenalized = usable & (pf == 0)
    if unpenalized.any():
        null_x = x.columns(np.flatnonzero(unpenalized))
        null_fit = fit_lasso(null_x, y, family, 0.0)
        mu = predict(null_fit, null_x, "response")
    else:
        mu = np.full_like(y, y.mean())
    grad = xs.T @ (y - mu) / y.shape[0]
    penalized = usable & (pf > 0)
    if not penalized.any():
        return 0.0
    return float(np.max(np.abs(grad[penalized]) / pf[penalized]))


def lambda_path(
    x,
    response,
    family: str = GAUSSIAN,
    n_lambda: int = config.DEFAULT_N_LAMBDA,
    lambda_min_ratio: Optional[float] = None,
    penalty_factors=None,
) -> np.ndarray:
    """Descending geometric grid from lambda_max to lambda_max * lambda_min_ratio."""
    _check_family(family)
    if n_lambda < 2:
        raise ValueError("n_lambda must be at least 2")
    x = DesignMatrix.from_array(x)
    y = _check_response(response, family, x.n_rows)
    if lambda_min_ratio is None:
        lambda_min_ratio = 1e-4 if x.n_rows > x.n_cols else 0.01
    if not 0.0 < lambda_min_ratio < 1.0:
        raise ValueError("lambda_min_ratio must lie in (0, 1)")
    if family == GAUSSIAN and np.ptp(y) == 0:
        raise DegenerateResponseError("zero-variance response")
    pf = _penalty_factors(penalty_factors, x.n_cols)
    lam_max = _lambda_max(x, x.standardized(), y, family, pf)
    if lam_max <= 0:
        raise DegenerateResponseError("zero-variance response after unpenalized terms")
    return np.geomspace(lam_max, lam_max * lambda_min_ratio, n_lambda)


def fit_path(x, response, family: str, lambdas, penalty_factors=None) -> List[PenalizedFit]:
    """
    Warm-started fits along a descending grid. After PATH_MIN_LAMBDAS fits the path
    stops once deviance explained passes PATH_DEVIANCE_STOP or grows by less than
    PATH_DEVIANCE_CHANGE_STOP of its current value from one lambda to the next.
    """
    _check_family(family)
    x = DesignMatrix.from_array(x)
    y = _check_response(response, family, x.n_rows)
    pf = _penalty_factors(penalty_factors, x.n_cols)
    xs = x.standardized()
    null_dev = _null_deviance(y, family)
    beta = np.zeros(x.n_cols)
    b0 = None
    gram = {}
    fits = []
    previous = 0.0
    for lam in lambdas:
        b0, beta, ok, it, msg = _solve(
            x, xs, y, family, float(lam), pf, beta, b0, config.LASSO_TOLERANCE, config.MAX_COORDINATE_UPDATES, gram
        )
        fit = _finish(x, y, family, lam, b0, beta, ok, it, msg, null_dev, xs)
        fits.append(fit)
        ratio = fit.dev_ratio
        if len(fits) >= config.PATH_MIN_LAMBDAS and ratio > 0:
            if ratio > config.PATH_DEVIANCE_STOP or ratio - previous < config.PATH_DEVIANCE_CHANGE_STOP * ratio:
                logger.debug("path stopped at lambda=%.6g, dev_ratio=%.4f", lam, ratio)
                break
        previous = ratio
    return fits


def predict(fit: PenalizedFit, x, scale: str = "response") -> np.ndarray:
    values = x.values if isinstance(x, DesignMatrix) else np.asarray(x, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] != fit.coefficients.shape[0]:
        raise DataError(
            f"dimension mismatch: fit has {fit.coefficients.shape[0]} coefficients, x has {values.shape[1]} columns"
        )
    eta = fit.intercept + values @ fit.coefficients
    if scale == "linear" or fit.family == GAUSSIAN:
        return eta
    if scale != "response":
        raise ValueError(f"unknown scale {scale!r}")
    return _open_unit(expit(eta))


def _pointwise_loss(y: np.ndarray, pred: np.ndarray, family: str) -> np.ndarray:
    if family == GAUSSIAN:
        return (y - pred) ** 2
    p = np.clip(pred, config.PROBABILITY_CLAMP, 1.0 - config.PROBABILITY_CLAMP)
    return -2.0 * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _fold_ids(y: np.ndarray, family: str, n_folds: int, seed: int) -> np.ndarray:
    n = y.shape[0]
    state = sklearn_state(seed)
    folds = np.empty(n, dtype=int)
    for k, (_, test) in enumerate(KFold(n_splits=n_folds, shuffle=True, random_state=state).split(y)):
        folds[test] = k
    if family == BINOMIAL:
        one_class = any(
            np.unique(y[folds == k]).size < 2 or np.unique(y[folds != k]).size < 2 for k in range(n_folds)
        )
        if one_class:
            logger.info("a fold held one response class; refolding stratified by class")
            splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=state)
            for k, (_, test) in enumerate(splitter.split(np.zeros(n), y)):
                folds[test] = k
    return folds


def _fold_losses(x, y, family, lambdas, pf, train, test):
    fits = fit_path(x.rows(train), y[train], family, lambdas, pf)
    preds = np.column_stack([predict(f, x.values[test], "response") for f in fits])
    return _pointwise_loss(y[test][:, None], preds, family)


def cross_validate(
    x,
    response,
    family: str = GAUSSIAN,
    n_folds: int = config.DEFAULT_N_FOLDS,
    seed: int = 0,
    n_lambda: int = config.DEFAULT_N_LAMBDA,
    lambda_min_ratio: Optional[float] = None,
    penalty_factors=None,
    rule: str = "min",
    n_jobs: int = 1,
) -> CvResult:
    _check_family(family)
    x = DesignMatrix.from_array(x)
    y = _check_response(response, family, x.n_rows)
    n = x.n_rows
    if not 2 <= n_folds <= n:
        raise DataError(f"{n_folds}-fold CV needs between 2 and {n} folds for {n} rows")
    if rule not in ("min", "1se"):
        raise ValueError(f"unknown lambda rule {rule!r}")
    pf = _penalty_factors(penalty_factors, x.n_cols)
    lambdas = lambda_path(x, y, family, n_lambda, lambda_min_ratio, pf)
    # the full-data path fixes the grid the folds are scored on
    full = fit_path(x, y, family, lambdas, pf)
    lambdas = lambdas[: len(full)]
    folds = _fold_ids(y, family, n_folds, seed)

    splits = [(np.flatnonzero(folds != k), np.flatnonzero(folds == k)) for k in range(n_folds)]
    if n_jobs > 1:
        per_fold = Parallel(n_jobs=n_jobs)(
            delayed(_fold_losses)(x, y, family, lambdas, pf, tr, te) for tr, te in splits
        )
    else:
        per_fold = [_fold_losses(x, y, family, lambdas, pf, tr, te) for tr, te in splits]

    # folds may stop their paths early; keep the common prefix of the grid
    length = min(loss.shape[1] for loss in per_fold)
    lambdas = lambdas[:length]
    fold_means = np.array([loss[:, :length].mean(axis=0) for loss in per_fold])
    fold_sizes = np.array([loss.shape[0] for loss in per_fold], dtype=float)
    cvm = (fold_sizes[:, None] * fold_means).sum(axis=0) / fold_sizes.sum()
    cvsd = np.sqrt(
        (fold_sizes[:, None] * (fold_means - cvm) ** 2).sum(axis=0) / fold_sizes.sum() / (n_folds - 1)
    )
    i_min = int(np.argmin(cvm))
    i_1se = int(np.flatnonzero(cvm <= cvm[i_min] + cvsd[i_min])[0])
    lam_min = float(lambdas[i_min])
    lam_1se = float(lambdas[i_1se])
    lambdas.setflags(write=False)
    return CvResult(
        lambda_grid=lambdas,
        mean_cv_error=cvm,
        cv_error_se=cvsd,
        lambda_min=lam_min,
        lambda_1se=lam_1se,
        selected_lambda=lam_min if rule == "min" else lam_1se,
        n_folds=n_folds,
        fold_seed=int(seed),
        rule=rule,
        path=tuple(full[:length]),
    )


def usable_folds(response, family: str, requested: int) -> int:
    """Largest fold count up to `requested` that keeps every fold non-empty; binomial
    responses are also capped at the size of the smaller class."""
    y = np.asarray(response, dtype=float).ravel()
    limit = y.shape[0]
    if family == BINOMIAL:
        limit = int(min(limit, np.sum(y == 1), np.sum(y == 0)))
    return min(int(requested), limit)


def fit_cv(
    x,
    response,
    family: str,
    cv_config: config.CvConfig,
    seed: int,
    penalty_factors=None,
    n_folds: Optional[int] = None,
) -> Tuple[PenalizedFit, Optional[CvResult]]:
    """Cross-validate, then return the full-data fit at the selected lambda.

    The fold count is reduced to what the data can fill (see usable_folds), with a
    warning. A gaussian response with nothing left to explain (constant, or fully
    explained by the unpenalized columns) has no lambda grid; the unpenalized fit is
    returned with CvResult None.
    """
    _check_family(family)
    x = DesignMatrix.from_array(x)
    y = _check_response(response, family, x.n_rows)
    requested = n_folds or cv_config.n_folds
    folds = usable_folds(y, family, requested)
    if folds < requested:
        logger.warning("%d-fold CV needs more rows than the %s response has; using %d folds", requested, family, folds)
    if folds < 2:
        raise DataError(f"{family} response is too small for cross-validation ({folds} usable folds)")
    try:
        cv = cross_validate(
            x,
            y,
            family,
            n_folds=folds,
            seed=seed,
            n_lambda=cv_config.n_lambda,
            lambda_min_ratio=cv_config.lambda_min_ratio,
            penalty_factors=penalty_factors,
            rule=cv_config.rule,
            n_jobs=cv_config.n_jobs,
        )
    except DegenerateResponseError:
        if family != GAUSSIAN:
            raise
        logger.info("response has no variation left to penalize; using the unpenalized fit")
        return fit_lasso(x, response, family, 0.0, penalty_factors), None
    fit = cv.path[cv.selected_index]
    logger.debug("cv %s fit: lambda=%.6g, nonzero=%d", family, fit.lambda_, fit.n_nonzero)
    return fit, cv
