# modules/estimators.py
"""
Treatment-effect estimators: the doubly robust matching estimator (matching on
estimated propensity and prognostic scores) with its weight-based variance, and
the comparison estimators it is benchmarked against.
"""

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable, Dict, Iterable, Optional, Tuple, Union

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from modules import lasso
from modules.config import CI_MULTIPLIER, CvConfig, EstimationConfig
from modules.errors import DataError, DrmatchError, NoMatchesError, NumericalError
from modules.lasso import GAUSSIAN, DesignMatrix, PenalizedFit
from modules.matching import ATE, ATT, MatchResult, MatchSpec, build_matches, effective_sample
from modules.scores import (
    BOTH,
    PROGNOSTIC_ONLY,
    PROPENSITY_ONLY,
    Dataset,
    ScoreSet,
    assemble_scores,
    fit_prognostic,
    fit_propensity,
)
from modules.seeding import OUTCOME_STREAM, derive_seed, sklearn_state

logger = logging.getLogger(__name__)

# name -> report label, in report order
ESTIMATOR_LABELS = {
    "oracle": "Oracle",
    "naive": "Naive",
    "outcome_lasso": "Outcome Lasso",
    "double_post_selection": "Double post selection",
    "lasso_ipw": "lasso IPW",
    "farrell": "Farrell",
    "lasso_dr": "lasso DR",
    "psm": "Propensity score matching",
    "prognostic_matching": "Prognostic score matching",
    "drme": "Doubly robust matching",
}
ESTIMATORS = tuple(ESTIMATOR_LABELS)
MATCHING_ESTIMATORS = {"psm": PROPENSITY_ONLY, "prognostic_matching": PROGNOSTIC_ONLY, "drme": BOTH}


@dataclass(frozen=True)
class EffectEstimate:
    estimator_name: str
    estimand: str
    tau_hat: float
    variance: float
    se: float
    ci_lower: float
    ci_upper: float
    n_used: int
    n_dropped: int
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator_name,
            "estimand": self.estimand,
            "tau_hat": self.tau_hat,
            "variance": self.variance,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
            "diagnostics": dict(self.diagnostics),
        }


def _estimate(name, estimand, tau, variance, n_used, n_dropped=0, /, approximate=False, **diagnostics) -> EffectEstimate:
    variance = max(float(variance), 0.0)
    se = float(np.sqrt(variance))
    if approximate:
        diagnostics["se_approximate"] = True
    return EffectEstimate(
        estimator_name=name,
        estimand=estimand,
        tau_hat=float(tau),
        variance=variance,
        se=se,
        ci_lower=float(tau) - CI_MULTIPLIER * se,
        ci_upper=float(tau) + CI_MULTIPLIER * se,
        n_used=int(n_used),
        n_dropped=int(n_dropped),
        diagnostics=diagnostics,
    )


# -------------------------
# Least squares
# -------------------------
def _ols(design: np.ndarray, y: np.ndarray):
    """OLS with an explicit rank check. Returns (coef, residuals, (D'D)^-1)."""
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise NumericalError("singular design")
    xtx_inv = np.linalg.inv(design.T @ design)
    coef = xtx_inv @ (design.T @ y)
    return coef, y - design @ coef, xtx_inv


def _hc1(design, resid, xtx_inv) -> np.ndarray:
    n, k = design.shape
    meat = (design * resid[:, None] ** 2).T @ design
    return xtx_inv @ meat @ xtx_inv * n / (n - k)


def _with_intercept(*blocks) -> np.ndarray:
    n = blocks[0].shape[0]
    return np.column_stack([np.ones(n)] + [np.asarray(b, dtype=float).reshape(n, -1) for b in blocks])


# -------------------------
# Outcome model: lasso of Y on (W, X), W unpenalized
# -------------------------
@dataclass(frozen=True, eq=False)
class OutcomeModel:
    fit: PenalizedFit
    design: DesignMatrix
    sigma2: float

    @property
    def tau_hat(self) -> float:
        return float(self.fit.coefficients[0])

    @property
    def covariate_support(self) -> np.ndarray:
        return np.flatnonzero(self.fit.coefficients[1:])

    def predict(self, x: DesignMatrix, w_value: float) -> np.ndarray:
        design = np.column_stack([np.full(x.n_rows, float(w_value)), x.values])
        return lasso.predict(self.fit, design, "response")


def fit_outcome_model(dataset: Dataset, cv_config: CvConfig, seed: int, lambda_: Optional[float] = None) -> OutcomeModel:
    design = DesignMatrix.from_array(np.column_stack([dataset.w, dataset.x.values]))
    pf = np.ones(design.n_cols)
    pf[0] = 0.0
    if lambda_ is None:
        fit, _ = lasso.fit_cv(design, dataset.y, GAUSSIAN, cv_config, derive_seed(seed, OUTCOME_STREAM), pf)
    else:
        fit = lasso.fit_lasso(design, dataset.y, GAUSSIAN, lambda_, pf)
    resid = dataset.y - lasso.predict(fit, design, "response")
    return OutcomeModel(fit, design, float(np.mean(resid ** 2)))


def residual_variance(dataset: Dataset, cv_config: CvConfig, seed: int, outcome_model: Optional[OutcomeModel] = None) -> float:
    """Average squared residual of the lasso of Y on (W, X) with W unpenalized."""
    if dataset.n < 3:
        raise DataError("residual variance needs at least 3 units")
    model = outcome_model or fit_outcome_model(dataset, cv_config, seed)
    return model.sigma2


# -------------------------
# Matching estimators
# -------------------------
def matching_se(dataset: Dataset, match_result: MatchResult, sigma2_hat: float) -> Tuple[float, float]:
    """Variance sigma2 * sum W R^2 / (sum W R)^2 + sigma2 * sum (1-W) R^2 / (sum (1-W) R)^2, and its root."""
    if sigma2_hat < 0:
        raise ValueError("sigma2_hat must be nonnegative")
    r = match_result.weights
    w = dataset.w
    t_sum = float(np.sum(w * r))
    c_sum = float(np.sum((1 - w) * r))
    if t_sum == 0 or c_sum == 0:
        raise NumericalError("zero denominator in matching variance: an arm has no retained units")
    variance = sigma2_hat * float(np.sum(w * r ** 2)) / t_sum ** 2 + sigma2_hat * float(np.sum((1 - w) * r ** 2)) / c_sum ** 2
    return variance, float(np.sqrt(variance))


def matching_estimate(
    dataset: Dataset,
    scores: Union[ScoreSet, np.ndarray],
    spec: MatchSpec,
    sigma2_hat: Optional[float] = None,
    name: str = "drme",
) -> EffectEstimate:
    """Mean matched difference; the variance, se and CI are NaN when sigma2_hat is None."""
    result = build_matches(scores, dataset.w, spec)
    retained = result.retained
    if not retained.any():
        raise NoMatchesError("no units within caliper")
    matched = result.matched_means(dataset.y)
    sign = 2 * dataset.w - 1
    tau = float(np.mean((sign * (dataset.y - matched))[retained]))
    diagnostics = {"n_matched_controls_used": int((result.usage_count[dataset.control] > 0).sum())}
    diagnostics.update(asdict(effective_sample(result)))
    if isinstance(scores, ScoreSet):
        diagnostics.update(scores.nonzero_counts())
    if sigma2_hat is None:
        # point estimate only
        nan = float("nan")
        est = _estimate(name, spec.estimand, tau, 0.0, retained.sum(), result.n_dropped, **diagnostics)
        return replace(est, variance=nan, se=nan, ci_lower=nan, ci_upper=nan)
    variance, _ = matching_se(dataset, result, sigma2_hat)
    diagnostics["sigma2_hat"] = float(sigma2_hat)
    return _estimate(name, spec.estimand, tau, variance, retained.sum(), result.n_dropped, **diagnostics)


def drme(
    dataset: Dataset,
    scores: ScoreSet,
    spec: MatchSpec = MatchSpec(),
    sigma2_hat: Optional[float] = None,
    cv_config: Optional[CvConfig] = None,
    seed: int = 0,
) -> EffectEstimate:
    """Doubly robust matching estimate. Without sigma2_hat the residual variance of the
    outcome lasso is estimated, with default CV settings unless cv_config is given."""
    dataset.require_both_arms()
    if sigma2_hat is None:
        sigma2_hat = residual_variance(dataset, cv_config or CvConfig(), seed)
    return matching_estimate(dataset, scores, spec, sigma2_hat, "drme")


# -------------------------
# Regression and weighting competitors
# -------------------------
def naive(dataset: Dataset, estimand: str = ATE) -> EffectEstimate:
    dataset.require_both_arms()
    yt = dataset.y[dataset.treated]
    yc = dataset.y[dataset.control]
    notes = {}
    var_t = yt.var(ddof=1) if yt.size > 1 else 0.0
    var_c = yc.var(ddof=1) if yc.size > 1 else 0.0
    if yt.size < 2 or yc.size < 2:
        notes["singleton_arm"] = True
    return _estimate("naive", estimand, yt.mean() - yc.mean(), var_t / yt.size + var_c / yc.size, dataset.n, **notes)


def oracle(dataset: Dataset, truth: Union[Callable[[np.ndarray], np.ndarray], np.ndarray], estimand: str = ATE) -> EffectEstimate:
    """OLS of Y on (W, true regressor basis); truth is the basis matrix or a function of X."""
    basis = truth(dataset.x.values) if callable(truth) else np.asarray(truth, dtype=float)
    design = _with_intercept(dataset.w, basis)
    coef, resid, xtx_inv = _ols(design, dataset.y)
    dof = dataset.n - design.shape[1]
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    return _estimate("oracle", estimand, coef[1], sigma2 * xtx_inv[1, 1], dataset.n)


def outcome_lasso(
    dataset: Dataset,
    cv_config: CvConfig,
    seed: int,
    outcome_model: Optional[OutcomeModel] = None,
    estimand: str = ATE,
) -> EffectEstimate:
    """W coefficient of the lasso of Y on (W, X), W unpenalized; OLS-style SE on the selected support."""
    model = outcome_model or fit_outcome_model(dataset, cv_config, seed)
    support = model.covariate_support
    design = _with_intercept(dataset.w, dataset.x.values[:, support])
    gram = design.T @ design
    try:
        gram_inv = np.linalg.inv(gram) if np.linalg.matrix_rank(gram) == gram.shape[0] else np.linalg.pinv(gram)
    except np.linalg.LinAlgError:
        gram_inv = np.linalg.pinv(gram)
    return _estimate(
        "outcome_lasso", estimand, model.tau_hat, model.sigma2 * gram_inv[1, 1], dataset.n,
        approximate=True, outcome_nonzero=int(support.size), lambda_y=model.fit.lambda_,
    )


def _selected_union(outcome_model: OutcomeModel, propensity_fit: PenalizedFit) -> np.ndarray:
    return np.union1d(outcome_model.covariate_support, propensity_fit.support).astype(int)


def double_post_selection(
    dataset: Dataset,
    cv_config: CvConfig,
    seed: int,
    outcome_model: Optional[OutcomeModel] = None,
    propensity_fit: Optional[PenalizedFit] = None,
    estimand: str = ATE,
) -> EffectEstimate:
    """OLS of Y on W and the union of covariates selected by the outcome and treatment lassos."""
    model = outcome_model or fit_outcome_model(dataset, cv_config, seed)
    if propensity_fit is None:
        propensity_fit, _ = fit_propensity(dataset, cv_config, seed)
    union = _selected_union(model, propensity_fit)
    if union.size >= dataset.n - 2:
        raise NumericalError(f"selection too dense: {union.size} covariates for {dataset.n} units")
    design = _with_intercept(dataset.w, dataset.x.values[:, union])
    coef, resid, xtx_inv = _ols(design, dataset.y)
    cov = _hc1(design, resid, xtx_inv)
    return _estimate(
        "double_post_selection", estimand, coef[1], cov[1, 1], dataset.n,
        approximate=True, n_selected=int(union.size),
    )


def _trimmed(propensity, trim: Optional[float]) -> np.ndarray:
    p = np.asarray(propensity, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise DataError("propensity scores must lie strictly in (0, 1)")
    if trim is not None:
        p = np.clip(p, trim, 1.0 - trim)
    return p


def lasso_ipw(
    dataset: Dataset,
    propensity,
    normalization: str = "hajek",
    trim: Optional[float] = None,
    estimand: str = ATE,
) -> EffectEstimate:
    """Inverse probability weighting; Hajek (normalized) weights by default, Horvitz-Thompson optional."""
    dataset.require_both_arms()
    p = _trimmed(propensity, trim)
    w, y, n = dataset.w, dataset.y, dataset.n
    if estimand == ATT:
        a = w.astype(float)
        b = (1 - w) * p / (1 - p)
    else:
        a = w / p
        b = (1 - w) / (1 - p)
    if normalization == "hajek":
        mu1 = float(np.sum(a * y) / np.sum(a))
        mu0 = float(np.sum(b * y) / np.sum(b))
        tau = mu1 - mu0
        psi = n * (a * (y - mu1) / np.sum(a) - b * (y - mu0) / np.sum(b))
        variance = float(np.sum(psi ** 2)) / n ** 2
    elif normalization == "horvitz_thompson":
        scale = n if estimand == ATE else dataset.n_treated
        summands = (a * y - b * y) * n / scale
        tau = float(summands.mean())
        variance = float(summands.var(ddof=1)) / n
    else:
        raise ValueError(f"unknown IPW normalization {normalization!r}")
    return _estimate("lasso_ipw", estimand, tau, variance, n, approximate=True, normalization=normalization)


def _refit_nuisances(dataset: Dataset, support: np.ndarray, seed: int):
    """Unpenalized refits on the selected covariates: logistic propensity and OLS outcome."""
    xs = dataset.x.values[:, support]
    if support.size:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            clf = LogisticRegression(penalty=None, max_iter=1000, random_state=sklearn_state(seed))
            clf.fit(xs, dataset.w)
        for warning in caught:
            if issubclass(warning.category, ConvergenceWarning):
                logger.warning("propensity refit: %s", warning.message)
        propensity = lasso._open_unit(clf.predict_proba(xs)[:, 1])
    else:
        propensity = np.full(dataset.n, dataset.w.mean())
    design = _with_intercept(dataset.w, xs)
    coef, _, _ = _ols(design, dataset.y)
    base = coef[0] + xs @ coef[2:]
    return propensity, base, base + coef[1]


def aipw(
    dataset: Dataset,
    propensity,
    m0,
    m1,
    refit: bool = False,
    seed: int = 0,
    support: Optional[np.ndarray] = None,
    trim: Optional[float] = None,
    estimand: str = ATE,
    name: Optional[str] = None,
) -> EffectEstimate:
    """
    Augmented IPW. With refit=True the nuisances are first refit without penalty on
    `support` (selected covariate indices); a singular refit falls back to the given
    penalized nuisances.
    """
    dataset.require_both_arms()
    notes = {}
    if refit:
        if support is None:
            raise ValueError("refit=True needs the selected covariate support")
        try:
            propensity, m0, m1 = _refit_nuisances(dataset, np.asarray(support, dtype=int), seed)
            notes["n_selected"] = int(len(support))
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            logger.warning("nuisance refit failed (%s); using penalized predictions", exc)
            notes["refit_fallback"] = True
    p = _trimmed(propensity, trim)
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    w, y, n = dataset.w, dataset.y, dataset.n
    if estimand == ATT:
        n1 = dataset.n_treated
        summands = (w * (y - m0) - (1 - w) * p / (1 - p) * (y - m0)) * n / n1
        tau = float(summands.mean())
        psi = summands - w * tau * n / n1
        variance = float(np.sum(psi ** 2)) / n ** 2
    else:
        summands = w * (y - m1) / p - (1 - w) * (y - m0) / (1 - p) + m1 - m0
        tau = float(summands.mean())
        variance = float(summands.var(ddof=1)) / n
    label = name or ("farrell" if refit else "lasso_dr")
    return _estimate(label, estimand, tau, variance, n, approximate=True, **notes)


def lasso_dr(
    dataset: Dataset,
    cv_config: CvConfig,
    seed: int,
    propensity,
    outcome_model: Optional[OutcomeModel] = None,
    outcome_form: str = "additive",
    control_fit: Optional[PenalizedFit] = None,
    trim: Optional[float] = None,
    estimand: str = ATE,
) -> EffectEstimate:
    """AIPW with lasso nuisances: one additive-treatment outcome lasso, or one lasso per arm."""
    if outcome_form == "additive":
        model = outcome_model or fit_outcome_model(dataset, cv_config, seed)
        m0 = model.predict(dataset.x, 0.0)
        m1 = model.predict(dataset.x, 1.0)
    elif outcome_form == "per_arm":
        if control_fit is None:
            control_fit, _ = fit_prognostic(dataset, cv_config, seed)
        treated = np.flatnonzero(dataset.treated)
        treated_fit, _ = lasso.fit_cv(
            dataset.x.rows(treated), dataset.y[treated], GAUSSIAN, cv_config,
            derive_seed(seed, OUTCOME_STREAM, 1), n_folds=min(cv_config.n_folds, treated.size),
        )
        m0 = lasso.predict(control_fit, dataset.x)
        m1 = lasso.predict(treated_fit, dataset.x)
    else:
        raise ValueError(f"unknown AIPW outcome form {outcome_form!r}")
    return aipw(dataset, propensity, m0, m1, refit=False, trim=trim, estimand=estimand, name="lasso_dr")


def farrell(
    dataset: Dataset,
    cv_config: CvConfig,
    seed: int,
    propensity_fit: Optional[PenalizedFit] = None,
    outcome_model: Optional[OutcomeModel] = None,
    trim: Optional[float] = None,
    estimand: str = ATE,
) -> EffectEstimate:
    """AIPW refit without penalty on the union of covariates selected by both lassos."""
    model = outcome_model or fit_outcome_model(dataset, cv_config, seed)
    if propensity_fit is None:
        propensity_fit, _ = fit_propensity(dataset, cv_config, seed)
    union = _selected_union(model, propensity_fit)
    return aipw(
        dataset,
        lasso.predict(propensity_fit, dataset.x),
        model.predict(dataset.x, 0.0),
        model.predict(dataset.x, 1.0),
        refit=True,
        seed=seed,
        support=union,
        trim=trim,
        estimand=estimand,
        name="farrell",
    )


# -------------------------
# All estimators on one dataset, nuisances shared
# -------------------------
class NuisanceCache:
    """Score and outcome models for one dataset, each fit on first use."""

    def __init__(self, dataset: Dataset, config: EstimationConfig, seed: int):
        self.dataset = dataset
        self.config = config
        self.seed = seed

    @cached_property
    def propensity(self) -> Tuple[PenalizedFit, np.ndarray]:
        return fit_propensity(self.dataset, self.config.cv, self.seed)

    @cached_property
    def prognostic(self) -> Tuple[PenalizedFit, np.ndarray]:
        return fit_prognostic(self.dataset, self.config.cv, self.seed)

    @cached_property
    def outcome_model(self) -> OutcomeModel:
        return fit_outcome_model(self.dataset, self.config.cv, self.seed)

    def use_score_models(self, bundle: dict) -> None:
        """Take the propensity / prognostic fits from a saved bundle instead of refitting."""
        for key in ("propensity", "prognostic"):
            fit = bundle.get(key)
            if fit is not None:
                self.__dict__[key] = (fit, lasso.predict(fit, self.dataset.x, "response"))

    @property
    def match_spec(self) -> MatchSpec:
        cfg = self.config
        return MatchSpec(cfg.m, cfg.caliper_sd, cfg.standardize_columns, cfg.estimand)

    def scores(self, which: str) -> ScoreSet:
        return assemble_scores(
            self.dataset, which, self.config.cv, self.seed, self.config.score_scale,
            propensity=self.propensity if which != PROGNOSTIC_ONLY else None,
            prognostic=self.prognostic if which != PROPENSITY_ONLY else None,
        )


def _run_one(name: str, nuis: NuisanceCache, basis) -> EffectEstimate:
    ds, cfg, seed = nuis.dataset, nuis.config, nuis.seed
    estimand = cfg.estimand
    if name == "naive":
        return naive(ds, estimand)
    if name == "oracle":
        if basis is None:
            raise DataError("oracle estimator needs the true regressor basis")
        return oracle(ds, basis, estimand)
    if name == "outcome_lasso":
        return outcome_lasso(ds, cfg.cv, seed, nuis.outcome_model, estimand)
    if name == "double_post_selection":
        return double_post_selection(ds, cfg.cv, seed, nuis.outcome_model, nuis.propensity[0], estimand)
    if name == "lasso_ipw":
        return lasso_ipw(ds, nuis.propensity[1], cfg.ipw_normalization, cfg.trim, estimand)
    if name == "lasso_dr":
        control_fit = nuis.prognostic[0] if cfg.aipw_outcome == "per_arm" else None
        return lasso_dr(ds, cfg.cv, seed, nuis.propensity[1], nuis.outcome_model, cfg.aipw_outcome,
                        control_fit, cfg.trim, estimand)
    if name == "farrell":
        return farrell(ds, cfg.cv, seed, nuis.propensity[0], nuis.outcome_model, cfg.trim, estimand)
    if name in MATCHING_ESTIMATORS:
        scores = nuis.scores(MATCHING_ESTIMATORS[name])
        return matching_estimate(ds, scores, nuis.match_spec, nuis.outcome_model.sigma2, name)
    raise ValueError(f"unknown estimator {name!r}")


def estimate_all(
    dataset: Dataset,
    names: Iterable[str] = ESTIMATORS,
    config: EstimationConfig = EstimationConfig(),
    seed: int = 0,
    basis=None,
    errors: Optional[Dict[str, Exception]] = None,
    nuisances: Optional[NuisanceCache] = None,
) -> Dict[str, EffectEstimate]:
    """
    Run the named estimators on one dataset, fitting each nuisance model once.
    With an `errors` dict, failures are recorded there instead of raised.
    """
    dataset.require_both_arms()
    nuis = nuisances or NuisanceCache(dataset, config, seed)
    out = {}
    for name in names:
        if name not in ESTIMATOR_LABELS:
            raise ValueError(f"unknown estimator {name!r}")
        try:
            out[name] = _run_one(name, nuis, basis)
        except (DrmatchError, np.linalg.LinAlgError) as exc:
            if errors is None:
                raise
            logger.warning("%s failed: %s", name, exc)
            errors[name] = exc
    return out
