# modules/diagnostics.py
"""
Covariate balance before and after matching: absolute standardized mean
differences (ASMD), before/after summary tables and a static SVG dot plot.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from modules.config import BALANCE_THRESHOLD  # noqa: E402
from modules.errors import DataError  # noqa: E402
from modules.matching import MatchResult  # noqa: E402
from modules.scores import Dataset  # noqa: E402

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("mean", "unbalanced_mean", "max")


def _arm_variance(values: np.ndarray) -> float:
    return float(values.var(ddof=1)) if values.size > 1 else 0.0


def asmd(x_col, w, unit_weights=None) -> float:
    """
    |weighted treated mean - weighted control mean| / sqrt((s2_t + s2_c) / 2).

    s2 are unweighted per-arm sample variances over the full sample, so
    before/after values share one denominator.
    """
    x = np.asarray(x_col, dtype=float).ravel()
    w = np.asarray(w).astype(int).ravel()
    weights = np.ones_like(x) if unit_weights is None else np.asarray(unit_weights, dtype=float).ravel()
    if x.shape != w.shape or x.shape != weights.shape:
        raise DataError("covariate, treatment and weights must have equal length")
    if np.any(weights < 0):
        raise DataError("unit weights must be nonnegative")
    treated = w == 1
    control = w == 0
    if weights[treated].sum() <= 0 or weights[control].sum() <= 0:
        raise DataError("both arms need positive-weight units")

    mean_t = np.average(x[treated], weights=weights[treated])
    mean_c = np.average(x[control], weights=weights[control])
    pooled_sd = np.sqrt((_arm_variance(x[treated]) + _arm_variance(x[control])) / 2.0)
    gap = abs(mean_t - mean_c)
    if pooled_sd == 0:
        if gap <= 1e-12 * max(1.0, abs(mean_t), abs(mean_c)):
            return 0.0
        raise DataError("degenerate covariate")
    return float(gap / pooled_sd)


@dataclass(frozen=True, eq=False)
class BalanceReport:
    # one row per covariate: covariate, asmd_before, asmd_after
    frame: pd.DataFrame
    threshold: float = BALANCE_THRESHOLD

    @property
    def unbalanced(self) -> pd.Series:
        """Covariates whose pre-matching ASMD exceeds the threshold."""
        return self.frame["asmd_before"] > self.threshold

    def summary(self) -> pd.DataFrame:
        """Mean, unbalanced mean and maximum ASMD, one row each for before and after."""
        rows = {}
        mask = self.unbalanced
        for when in ("before", "after"):
            col = self.frame[f"asmd_{when}"]
            rows[when] = {
                "mean": float(col.mean()),
                "unbalanced_mean": float(col[mask].mean()) if mask.any() else float("nan"),
                "max": float(col.max()),
            }
        return pd.DataFrame.from_dict(rows, orient="index", columns=list(SUMMARY_COLUMNS))

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "covariates": self.frame.to_dict(orient="records"),
            "summary": self.summary().to_dict(orient="index"),
        }


def balance_report(dataset: Dataset, match_result: Optional[MatchResult] = None) -> BalanceReport:
    """
    ASMD per covariate before matching (unit weights 1) and after (weights R_i).
    Without a match result the after column repeats the before column.
    """
    after_weights = None if match_result is None else match_result.weights
    if match_result is not None and match_result.n != dataset.n:
        raise DataError("match result does not belong to this dataset")
    records = []
    for j, name in enumerate(dataset.covariate_names):
        col = dataset.x.values[:, j]
        before = asmd(col, dataset.w)
        after = before if after_weights is None else asmd(col, dataset.w, after_weights)
        records.append({"covariate": name, "asmd_before": before, "asmd_after": after})
    frame = pd.DataFrame.from_records(records, columns=["covariate", "asmd_before", "asmd_after"])
    report = BalanceReport(frame)
    summary = report.summary()
    logger.info(
        "balance: mean ASMD %.4f -> %.4f, max %.4f -> %.4f",
        summary.at["before", "mean"], summary.at["after", "mean"],
        summary.at["before", "max"], summary.at["after", "max"],
    )
    return report


def summary_table(reports: Mapping[str, BalanceReport]) -> pd.DataFrame:
    """One 'Before' row plus one row per method: mean / unbalanced mean / maximum ASMD."""
    if not reports:
        raise ValueError("no balance reports given")
    first = next(iter(reports.values()))
    rows = {"Before": first.summary().loc["before"]}
    for label, report in reports.items():
        rows[label] = report.summary().loc["after"]
    table = pd.DataFrame(rows).T
    table.index.name = "method"
    return table


def plot_balance(reports: Mapping[str, BalanceReport], path, threshold: float = BALANCE_THRESHOLD) -> None:
    """Dot plot of ASMD against covariate index, one series per method, dashed line at the threshold."""
    if not reports:
        raise ValueError("no balance reports given")
    first = next(iter(reports.values()))
    index = np.arange(1, len(first.frame) + 1)
    series: Dict[str, np.ndarray] = {"Before": first.frame["asmd_before"].to_numpy()}
    for label, report in reports.items():
        series[label] = report.frame["asmd_after"].to_numpy()

    plt.rcParams["svg.hashsalt"] = "drmatch"
    fig, ax = plt.subplots(figsize=(8, 5))
    markers = ("o", "s", "^", "D", "v")
    for k, (label, values) in enumerate(series.items()):
        ax.scatter(index, values, s=14, marker=markers[k % len(markers)], label=label)
    ax.axhline(y=threshold, color="black", linestyle="--", linewidth=1)
    ax.set_xlabel("Covariate")
    ax.set_ylabel("Absolute standardized difference")
    ax.legend(loc="upper right")
    ax.grid(True, alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("wrote balance plot to %s", path)
