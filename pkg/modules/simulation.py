# modules/simulation.py
"""
Scenario generators and the Monte Carlo harness.

Every replication draws its data from a stream keyed by (seed, replication
index), so a study gives the same numbers for any n_jobs and any order of
execution.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit

from modules.config import MAX_FAILURE_FRACTION, EstimationConfig
from modules.errors import DrmatchError, NumericalError, UsageError
from modules.estimators import ESTIMATOR_LABELS, ESTIMATORS, estimate_all
from modules.scores import Dataset
from modules.seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

LINEAR = "linear_31"
NONLINEAR = "nonlinear_32"
HIGHLY_NONLINEAR = "appendixE"
FORMS = (LINEAR, NONLINEAR, HIGHLY_NONLINEAR)

# number of leading covariates each form reads
_COVARIATES_USED = {LINEAR: 8, NONLINEAR: 3, HIGHLY_NONLINEAR: 5}

_DATA_STREAM = 0
_ESTIMATION_STREAM = 1

DOUBLY_ROBUST = ("drme", "lasso_dr", "farrell")


# -------------------------
# Generating models
# -------------------------
def treatment_index(form: str, x: np.ndarray) -> np.ndarray:
    """Linear predictor of the treatment model (logit scale)."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    if form == LINEAR:
        return 0.4 * x1 + 0.9 * x2 - 0.4 * x3 - 0.7 * x[:, 3] - 0.3 * x[:, 4] + 0.6 * x[:, 5]
    if form == NONLINEAR:
        return 0.3 * x1 ** 2 + 0.5 * x1 ** 3 - 0.3 * x2 ** 4 + 0.4 * x3 ** 2
    if form == HIGHLY_NONLINEAR:
        # log term is undefined at x1 == 0
        x1_sq = np.maximum(x1 ** 2, 1e-12)
        return (
            0.7 * np.exp(x1) + 0.7 * np.log(0.7 * x1_sq)
            - 0.8 * x2 ** 3 + 0.7 * x3 ** 3 - 0.5 * x[:, 3] ** 3 - 0.8 * x[:, 4] ** 2
        )
    raise ValueError(f"unknown treatment form {form!r}")


def outcome_mean(form: str, x: np.ndarray) -> np.ndarray:
    """E[Y(0) | X]."""
    return -2.0 + outcome_basis(form, x) @ _OUTCOME_COEFFICIENTS[form]


def outcome_basis(form: str, x: np.ndarray) -> np.ndarray:
    """Regressors of the true outcome model, without intercept and treatment."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    if form == LINEAR:
        return x[:, [0, 1, 2, 3, 6, 7]]
    if form == NONLINEAR:
        return np.column_stack([x1, x2 ** 2, x2 ** 3, x3 ** 2])
    if form == HIGHLY_NONLINEAR:
        return np.column_stack([np.exp(0.6 * x1), x2 ** 3, x3 ** 2])
    raise ValueError(f"unknown outcome form {form!r}")


_OUTCOME_COEFFICIENTS = {
    LINEAR: np.array([0.9, -0.9, 0.2, -0.2, 0.9, -0.9]),
    NONLINEAR: np.array([-0.5, 0.5, 0.4, 0.3]),
    HIGHLY_NONLINEAR: np.array([0.7, -0.6, 0.7]),
}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    n: int
    p: int
    sigma2: float = 1.0
    true_tau: float = 1.0
    treatment_form: str = LINEAR
    outcome_form: str = LINEAR
    seed: int = 0

    def __post_init__(self):
        for form in (self.treatment_form, self.outcome_form):
            if form not in FORMS:
                raise UsageError(f"unknown scenario form {form!r}")
        needed = max(_COVARIATES_USED[self.treatment_form], _COVARIATES_USED[self.outcome_form])
        if self.p < needed:
            raise UsageError(f"scenario {self.name!r} needs p >= {needed}, got {self.p}")
        if self.n < 4:
            raise UsageError("scenario needs n >= 4")
        if not self.sigma2 > 0:
            raise UsageError("sigma2 must be positive")

    def oracle_basis(self, x: np.ndarray) -> np.ndarray:
        return outcome_basis(self.outcome_form, x)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


PRESETS = {
    "linear31": ScenarioSpec("linear31", 200, 1000, treatment_form=LINEAR, outcome_form=LINEAR),
    "nonlinear32": ScenarioSpec("nonlinear32", 200, 1000, treatment_form=NONLINEAR, outcome_form=NONLINEAR),
    "appendixE": ScenarioSpec("appendixE", 200, 1000, treatment_form=HIGHLY_NONLINEAR, outcome_form=HIGHLY_NONLINEAR),
    "mis_treatment": ScenarioSpec("mis_treatment", 500, 100, treatment_form=NONLINEAR, outcome_form=LINEAR),
    "mis_outcome": ScenarioSpec("mis_outcome", 500, 100, treatment_form=LINEAR, outcome_form=NONLINEAR),
}

_MISSPECIFIED_FORMS = {
    "treatment": (NONLINEAR, LINEAR),
    "outcome": (LINEAR, NONLINEAR),
    "both": (NONLINEAR, NONLINEAR),
}


def scenario(name: str, **overrides) -> ScenarioSpec:
    """A preset with optional field overrides (n, p, sigma2, seed, ...)."""
    if name not in PRESETS:
        raise UsageError(f"unknown scenario {name!r}; choose from {', '.join(PRESETS)}")
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(PRESETS[name], **overrides)


def generate(spec: ScenarioSpec, replication_index: int):
    """Draw one dataset; returns (dataset, true_tau)."""
    rng = rng_for(spec.seed, replication_index, _DATA_STREAM)
    x = rng.standard_normal((spec.n, spec.p))
    w = rng.binomial(1, expit(treatment_index(spec.treatment_form, x)))
    noise = rng.normal(0.0, math.sqrt(spec.sigma2), spec.n)
    y = outcome_mean(spec.outcome_form, x) + spec.true_tau * w + noise
    return Dataset.from_arrays(y, w, x), spec.true_tau


# -------------------------
# Monte Carlo harness
# -------------------------
@dataclass(frozen=True, eq=False)
class SimulationSummary:
    # one row per estimator
    table: pd.DataFrame
    n_reps: int
    scenario: ScenarioSpec
    runtime: float
    estimates: Optional[pd.DataFrame] = None
    failures: Dict[str, int] = field(default_factory=dict)

    def row(self, estimator: str) -> pd.Series:
        return self.table.loc[estimator]

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario.to_dict(),
            "n_reps": self.n_reps,
            "runtime_seconds": self.runtime,
            "failures": dict(self.failures),
            "estimators": self.table.reset_index().to_dict(orient="records"),
        }
        if self.estimates is not None:
            out["replications"] = self.estimates.to_dict(orient="list")
        return out


def _replicate(spec: ScenarioSpec, rep: int, names: Sequence[str], config: EstimationConfig) -> dict:
    errors: Dict[str, Exception] = {}
    try:
        dataset, _ = generate(spec, rep)
        estimates = estimate_all(
            dataset, names, config, derive_seed(spec.seed, rep, _ESTIMATION_STREAM),
            basis=spec.oracle_basis(dataset.x.values), errors=errors,
        )
    except DrmatchError as exc:
        logger.warning("replication %d failed: %s", rep, exc)
        return {name: None for name in names}
    return {name: estimates.get(name) for name in names}


def summarize(name: str, tau_hats, ses, lowers, uppers, true_tau: float) -> dict:
    """Monte Carlo summary of one estimator; checks mse = bias^2 + sd^2 (n-1)/n."""
    tau_hats = np.asarray(tau_hats, dtype=float)
    n_ok = tau_hats.size
    bias = float(tau_hats.mean() - true_tau)
    sd = float(tau_hats.std(ddof=1))
    mse = float(np.mean((tau_hats - true_tau) ** 2))
    if abs(mse - (bias ** 2 + sd ** 2 * (n_ok - 1) / n_ok)) > 1e-10:
        raise NumericalError(f"{name}: summary identity violated")
    ses = np.asarray(ses, dtype=float)
    lowers = np.asarray(lowers, dtype=float)
    uppers = np.asarray(uppers, dtype=float)
    has_ci = np.isfinite(ses).all()
    return {
        "label": ESTIMATOR_LABELS.get(name, name),
        "abs_bias": abs(bias),
        "sd": sd,
        "mse": mse,
        "mean_se": float(ses.mean()) if has_ci else float("nan"),
        "coverage_95": float(np.mean((lowers <= true_tau) & (true_tau <= uppers))) if has_ci else float("nan"),
        # interval shifted by the empirical bias
        "coverage_bias_corrected": (
            float(np.mean((lowers - bias <= true_tau) & (true_tau <= uppers - bias))) if has_ci else float("nan")
        ),
        "n_ok": n_ok,
    }


def run_study(
    spec: ScenarioSpec,
    estimator_set: Iterable[str] = ESTIMATORS,
    n_reps: int = 1000,
    parallelism: int = 1,
    config: EstimationConfig = EstimationConfig(),
    keep_estimates: bool = False,
) -> SimulationSummary:
    names = list(estimator_set)
    if n_reps < 2:
        raise UsageError("n_reps must be at least 2")
    unknown = [n for n in names if n not in ESTIMATOR_LABELS]
    if unknown:
        raise UsageError(f"unknown estimators: {', '.join(unknown)}")

    logger.info("study %s: n=%d p=%d reps=%d jobs=%d", spec.name, spec.n, spec.p, n_reps, parallelism)
    start = time.perf_counter()
    if parallelism > 1:
        results = Parallel(n_jobs=parallelism)(
            delayed(_replicate)(spec, rep, names, config) for rep in range(n_reps)
        )
    else:
        results = [_replicate(spec, rep, names, config) for rep in range(n_reps)]
    runtime = time.perf_counter() - start

    rows = {}
    failures = {}
    for name in names:
        ok = [r[name] for r in results if r[name] is not None]
        n_failed = n_reps - len(ok)
        failures[name] = n_failed
        if n_failed / n_reps >= MAX_FAILURE_FRACTION and n_failed > 0:
            raise NumericalError(f"{name} failed in {n_failed} of {n_reps} replications")
        if n_failed:
            logger.warning("%s: %d failed replications excluded", name, n_failed)
        if len(ok) < 2:
            raise NumericalError(f"{name}: fewer than 2 successful replications")
        row = summarize(
            name,
            [e.tau_hat for e in ok],
            [e.se for e in ok],
            [e.ci_lower for e in ok],
            [e.ci_upper for e in ok],
            spec.true_tau,
        )
        row["n_failed"] = n_failed
        rows[name] = row

    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "estimator"
    estimates = None
    if keep_estimates:
        estimates = pd.DataFrame(
            {name: [r[name].tau_hat if r[name] is not None else np.nan for r in results] for name in names}
        )
        estimates.index.name = "replication"
    logger.info("study %s finished in %.1fs", spec.name, runtime)
    return SimulationSummary(table, n_reps, spec, runtime, estimates, failures)


# -------------------------
# Grids
# -------------------------
def coverage_grid(
    n_values: Sequence[int],
    p_values: Sequence[int],
    n_reps: int,
    seed: int,
    form: str = LINEAR,
    sigma2: float = 1.0,
    config: EstimationConfig = EstimationConfig(),
    parallelism: int = 1,
) -> pd.DataFrame:
    """DRME 95% interval coverage for each (N, P); rows N, columns P."""
    grid = pd.DataFrame(index=pd.Index(list(n_values), name="n"), columns=pd.Index(list(p_values), name="p"), dtype=float)
    for n in n_values:
        for p in p_values:
            spec = ScenarioSpec(
                f"coverage_{form}", n, p, sigma2=sigma2, treatment_form=form, outcome_form=form,
                seed=derive_seed(seed, n, p),
            )
            summary = run_study(spec, ["drme"], n_reps, parallelism, config)
            grid.loc[n, p] = summary.row("drme")["coverage_95"]
            logger.info("coverage n=%d p=%d: %.3f", n, p, grid.loc[n, p])
    return grid


def misspecification_grid(
    which: str,
    n_values: Sequence[int],
    p_values: Sequence[int],
    n_reps: int,
    seed: int,
    estimators: Sequence[str] = DOUBLY_ROBUST,
    sigma2: float = 1.0,
    config: EstimationConfig = EstimationConfig(),
    parallelism: int = 1,
) -> pd.DataFrame:
    """
    Doubly robust estimators with the treatment model, the outcome model or both
    generated from the nonlinear form and the other from the linear form.
    Long format: one row per (n, p, estimator).
    """
    if which not in _MISSPECIFIED_FORMS:
        raise UsageError(f"unknown misspecification {which!r}; choose treatment, outcome or both")
    treatment_form, outcome_form = _MISSPECIFIED_FORMS[which]
    records = []
    for p in p_values:
        for n in n_values:
            spec = ScenarioSpec(
                f"mis_{which}", n, p, sigma2=sigma2, treatment_form=treatment_form,
                outcome_form=outcome_form, seed=derive_seed(seed, n, p),
            )
            summary = run_study(spec, estimators, n_reps, parallelism, config)
            for name, row in summary.table.iterrows():
                records.append({"which": which, "n": n, "p": p, "estimator": name, **row.to_dict()})
    return pd.DataFrame.from_records(records)


def rate_curve(grid: pd.DataFrame, estimator: str = "drme") -> pd.DataFrame:
    """Empirical bias next to the sqrt(log P / N) and 1/sqrt(N) reference rates."""
    rows = grid[grid["estimator"] == estimator] if "estimator" in grid.columns else grid
    if rows.empty:
        raise ValueError(f"no rows for estimator {estimator!r}")
    out = rows[["n", "p", "abs_bias"]].copy()
    out["rate_log_p"] = np.sqrt(np.log(out["p"].astype(float)) / out["n"].astype(float))
    out["rate_root_n"] = 1.0 / np.sqrt(out["n"].astype(float))
    out["bias_over_log_p_rate"] = out["abs_bias"] / out["rate_log_p"]
    return out.sort_values(["p", "n"]).reset_index(drop=True)
