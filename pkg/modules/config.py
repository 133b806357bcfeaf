# modules/config.py
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

# -------------------------
# Constants
# -------------------------
DEFAULT_N_FOLDS = 10
DEFAULT_N_LAMBDA = 100
DEFAULT_M = 1
DEFAULT_CALIPER_SD = 0.5
CI_MULTIPLIER = 1.96
BALANCE_THRESHOLD = 0.1

LASSO_TOLERANCE = 1e-7
MAX_COORDINATE_UPDATES = 100_000
MAX_IRLS_ITERATIONS = 25
PROBABILITY_CLAMP = 1e-5
FULL_SWEEP_EVERY = 10
PATH_DEVIANCE_STOP = 0.999
PATH_DEVIANCE_CHANGE_STOP = 1e-5
PATH_MIN_LAMBDAS = 5

MAX_FAILURE_FRACTION = 0.01

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"

# -------------------------
# Environment overrides
# -------------------------
def default_n_jobs() -> int:
    raw = os.environ.get("DRMATCH_N_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger(__name__).warning("ignoring non-integer DRMATCH_N_JOBS=%r", raw)
        return 1


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else os.environ.get("DRMATCH_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# -------------------------
# Run configuration
# -------------------------
@dataclass(frozen=True)
class CvConfig:
    n_folds: int = DEFAULT_N_FOLDS
    n_lambda: int = DEFAULT_N_LAMBDA
    lambda_min_ratio: Optional[float] = None  # None -> 1e-4 if N > P else 0.01
    rule: str = "min"  # "min" or "1se"
    n_jobs: int = 1

    def __post_init__(self):
        if self.rule not in ("min", "1se"):
            raise ValueError(f"unknown lambda rule {self.rule!r}")
        if self.n_folds < 2:
            raise ValueError("n_folds must be at least 2")


@dataclass(frozen=True)
class EstimationConfig:
    m: int = DEFAULT_M
    caliper_sd: Optional[float] = DEFAULT_CALIPER_SD
    estimand: str = "ATE"
    standardize_columns: bool = True
    score_scale: str = "response"  # or "linear" for sensitivity analysis
    ipw_normalization: str = "hajek"  # or "horvitz_thompson"
    trim: Optional[float] = None
    aipw_outcome: str = "additive"  # or "per_arm"
    cv: CvConfig = field(default_factory=CvConfig)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.caliper_sd is not None and not self.caliper_sd > 0:
            raise ValueError("caliper must be positive")
        if self.estimand not in ("ATE", "ATT"):
            raise ValueError(f"unknown estimand {self.estimand!r}")
        if self.score_scale not in ("response", "linear"):
            raise ValueError(f"unknown score scale {self.score_scale!r}")
        if self.ipw_normalization not in ("hajek", "horvitz_thompson"):
            raise ValueError(f"unknown IPW normalization {self.ipw_normalization!r}")
        if self.trim is not None and not 0 < self.trim < 0.5:
            raise ValueError("trim must lie in (0, 0.5)")
        if self.aipw_outcome not in ("additive", "per_arm"):
            raise ValueError(f"unknown AIPW outcome form {self.aipw_outcome!r}")
