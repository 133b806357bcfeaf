# modules/scores.py
"""
Matching variables: the estimated propensity score (binomial lasso of W on X)
and the prognostic score (gaussian lasso of Y on X, fit on controls only).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import joblib
import numpy as np

from modules import lasso
from modules.config import DEFAULT_N_FOLDS, CvConfig
from modules.errors import DataError
from modules.lasso import BINOMIAL, GAUSSIAN, DesignMatrix, PenalizedFit
from modules.seeding import PROGNOSTIC_STREAM, PROPENSITY_STREAM, derive_seed

logger = logging.getLogger(__name__)

PROPENSITY = "propensity"
PROGNOSTIC = "prognostic"
PROPENSITY_ONLY = "propensity_only"
PROGNOSTIC_ONLY = "prognostic_only"
BOTH = "both"

MIN_CONTROLS = 4


# -------------------------
# Dataset
# -------------------------
@dataclass(frozen=True, eq=False)
class Dataset:
    y: np.ndarray
    w: np.ndarray
    x: DesignMatrix
    covariate_names: Tuple[str, ...] = ()
    outcome_name: str = "y"
    treatment_name: str = "w"

    @classmethod
    def from_arrays(cls, y, w, x, covariate_names: Optional[Sequence[str]] = None, **names) -> "Dataset":
        design = DesignMatrix.from_array(x)
        y = np.array(y, dtype=float).ravel()
        w = np.array(w, dtype=float).ravel()
        n = design.n_rows
        if y.shape[0] != n or w.shape[0] != n:
            raise DataError(f"lengths disagree: y={y.shape[0]}, w={w.shape[0]}, x={n}")
        if not np.all(np.isfinite(y)):
            raise DataError("outcome has non-finite entries")
        if not np.all((w == 0) | (w == 1)):
            raise DataError("treatment must be 0/1")
        if covariate_names is None:
            covariate_names = [f"X{j + 1}" for j in range(design.n_cols)]
        if len(covariate_names) != design.n_cols:
            raise DataError("covariate_names length does not match the design")
        w = w.astype(int)
        y.setflags(write=False)
        w.setflags(write=False)
        return cls(y, w, design, tuple(covariate_names), **names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def treated(self) -> np.ndarray:
        return self.w == 1

    @property
    def control(self) -> np.ndarray:
        return self.w == 0

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return int(self.control.sum())

    def require_both_arms(self) -> None:
        if self.n_treated == 0 or self.n_control == 0:
            raise DataError("both treatment arms must be non-empty")

    def with_outcome(self, y) -> "Dataset":
        return Dataset.from_arrays(
            y, self.w, self.x, self.covariate_names,
            outcome_name=self.outcome_name, treatment_name=self.treatment_name,
        )

    def with_treatment(self, w) -> "Dataset":
        return Dataset.from_arrays(
            self.y, w, self.x, self.covariate_names,
            outcome_name=self.outcome_name, treatment_name=self.treatment_name,
        )


# -------------------------
# ScoreSet
# -------------------------
@dataclass(frozen=True, eq=False)
class ScoreSet:
    columns: Dict[str, np.ndarray]
    propensity_fit: Optional[PenalizedFit] = None
    prognostic_fit: Optional[PenalizedFit] = None
    scale: str = "response"

    def __post_init__(self):
        if not 1 <= len(self.columns) <= 2:
            raise ValueError("a ScoreSet holds one or two score columns")
        for name, col in self.columns.items():
            if not np.all(np.isfinite(col)):
                raise DataError(f"score column {name!r} has non-finite entries")
        if PROPENSITY in self.columns:
            p = self.columns[PROPENSITY]
            if np.any(p <= 0) or np.any(p >= 1):
                raise DataError("propensity scores must lie strictly in (0, 1)")

    @classmethod
    def from_arrays(cls, **columns) -> "ScoreSet":
        """ScoreSet from precomputed score vectors (no fitted models attached)."""
        return cls({name: np.asarray(col, dtype=float) for name, col in columns.items()})

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.columns)

    @property
    def matrix(self) -> np.ndarray:
        return np.column_stack(list(self.columns.values()))

    def nonzero_counts(self) -> Dict[str, int]:
        counts = {}
        if self.propensity_fit is not None:
            counts["propensity_nonzero"] = self.propensity_fit.n_nonzero
        if self.prognostic_fit is not None:
            counts["prognostic_nonzero"] = self.prognostic_fit.n_nonzero
        return counts


# -------------------------
# Score models
# -------------------------
def fit_propensity(dataset: Dataset, cv_config: CvConfig, seed: int, scale: str = "response"):
    """Binomial lasso of W on X with CV-selected lambda; returns (fit, scores)."""
    dataset.require_both_arms()
    fit, _ = lasso.fit_cv(dataset.x, dataset.w, BINOMIAL, cv_config, derive_seed(seed, PROPENSITY_STREAM))
    scores = lasso.predict(fit, dataset.x, scale)
    logger.debug("propensity model: lambda=%.6g, nonzero=%d", fit.lambda_, fit.n_nonzero)
    return fit, scores


def fit_prognostic(dataset: Dataset, cv_config: CvConfig, seed: int):
    """Gaussian lasso of Y on X fit on control units; predictions for all N units."""
    controls = np.flatnonzero(dataset.control)
    n_controls = controls.size
    if n_controls < MIN_CONTROLS:
        raise DataError(f"prognostic model needs at least {MIN_CONTROLS} controls, got {n_controls}")
    n_folds = cv_config.n_folds
    if n_controls < n_folds:
        n_folds = min(DEFAULT_N_FOLDS, n_controls)
        logger.warning("only %d controls; reducing prognostic CV to %d folds", n_controls, n_folds)
    fit, _ = lasso.fit_cv(
        dataset.x.rows(controls),
        dataset.y[controls],
        GAUSSIAN,
        cv_config,
        derive_seed(seed, PROGNOSTIC_STREAM),
        n_folds=n_folds,
    )
    scores = lasso.predict(fit, dataset.x, "response")
    logger.debug("prognostic model: lambda=%.6g, nonzero=%d", fit.lambda_, fit.n_nonzero)
    return fit, scores


def assemble_scores(
    dataset: Dataset,
    which: str,
    cv_config: CvConfig,
    seed: int,
    scale: str = "response",
    propensity: Optional[Tuple[PenalizedFit, np.ndarray]] = None,
    prognostic: Optional[Tuple[PenalizedFit, np.ndarray]] = None,
) -> ScoreSet:
    """Build the ScoreSet for `which`; already-fitted (fit, scores) pairs may be passed in.

    scale="linear" matches on the logit of the propensity score instead of the
    probability (sensitivity analysis); that column is then named propensity_logit.
    """
    if which not in (PROPENSITY_ONLY, PROGNOSTIC_ONLY, BOTH):
        raise ValueError(f"unknown score selection {which!r}")
    columns = {}
    prop_fit = prog_fit = None
    if which in (PROPENSITY_ONLY, BOTH):
        prop_fit, prop = propensity or fit_propensity(dataset, cv_config, seed)
        if scale == "linear":
            columns["propensity_logit"] = lasso.predict(prop_fit, dataset.x, "linear")
        else:
            columns[PROPENSITY] = prop
    if which in (PROGNOSTIC_ONLY, BOTH):
        prog_fit, prog = prognostic or fit_prognostic(dataset, cv_config, seed)
        columns[PROGNOSTIC] = prog
    scores = ScoreSet(columns, prop_fit, prog_fit, scale)
    for name, count in scores.nonzero_counts().items():
        logger.info("%s coefficients: %d", name.replace("_", " "), count)
    return scores


# -------------------------
# Persistence (joblib bundle, {"model", "columns"} style)
# -------------------------
def save_score_models(scores: ScoreSet, covariate_names: Sequence[str], path) -> None:
    bundle = {
        "propensity": scores.propensity_fit,
        "prognostic": scores.prognostic_fit,
        "columns": list(covariate_names),
    }
    joblib.dump(bundle, path)
    logger.info("saved score models to %s (%d covariates)", path, len(covariate_names))


def load_score_models(path, covariate_names: Optional[Sequence[str]] = None) -> dict:
    bundle = joblib.load(path)
    if not isinstance(bundle, dict) or "columns" not in bundle:
        raise DataError(f"{path} is not a drmatch score-model bundle")
    if covariate_names is not None and list(covariate_names) != bundle["columns"]:
        raise DataError("score-model bundle was fit on different covariates")
    return bundle
