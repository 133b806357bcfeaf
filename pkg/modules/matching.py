# modules/matching.py
"""
Nearest-neighbour matching with replacement on score columns.

Distance is Euclidean over the score columns, each divided by its full-sample
sd when `standardize_columns` is set. A caliper is a box: candidate j is
admissible for i only if |z_k(i) - z_k(j)| <= caliper_sd * sd(z_k) for every
column k. Ties go to the smaller unit index.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from modules.errors import DataError
from modules.scores import ScoreSet

logger = logging.getLogger(__name__)

ATE = "ATE"
ATT = "ATT"
ESTIMANDS = (ATE, ATT)

_CHUNK = 256


@dataclass(frozen=True)
class MatchSpec:
    m: int = 1
    caliper_sd: Optional[float] = None
    standardize_columns: bool = True
    estimand: str = ATE

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("M must be at least 1")
        if self.caliper_sd is not None and not self.caliper_sd > 0:
            raise ValueError("caliper_sd must be positive")
        if self.estimand not in ESTIMANDS:
            raise ValueError(f"unknown estimand {self.estimand!r}")


@dataclass(frozen=True, eq=False)
class MatchResult:
    matches: Tuple[np.ndarray, ...]
    usage_count: np.ndarray
    weights: np.ndarray
    retained: np.ndarray
    n_dropped: int
    spec: MatchSpec
    w: np.ndarray

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def matched_means(self, y: np.ndarray) -> np.ndarray:
        """Mean outcome over each unit's matches; NaN for units without matches."""
        y = np.asarray(y, dtype=float)
        out = np.full(self.n, np.nan)
        for i, js in enumerate(self.matches):
            if js.size:
                out[i] = y[js].mean()
        return out


@dataclass(frozen=True)
class EffectiveSample:
    n_retained: int
    n_dropped: int
    retained_treated: int
    retained_control: int
    dropped_treated: int
    dropped_control: int


def _score_matrix(scores) -> np.ndarray:
    z = scores.matrix if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if not np.all(np.isfinite(z)):
        raise DataError("scores have non-finite entries")
    return z


def _column_sds(z: np.ndarray) -> np.ndarray:
    sds = z.std(axis=0, ddof=1) if z.shape[0] > 1 else np.zeros(z.shape[1])
    flat = ~(sds > 0) | (np.ptp(z, axis=0) == 0)
    for k in np.flatnonzero(flat):
        logger.warning("score column %d has zero variance; using sd=1 for scaling and caliper", k)
    sds[flat] = 1.0
    return sds


def build_matches(scores, w, spec: MatchSpec = MatchSpec()) -> MatchResult:
    z = _score_matrix(scores)
    w = np.asarray(w).astype(int).ravel()
    n = w.shape[0]
    if z.shape[0] != n:
        raise DataError(f"scores have {z.shape[0]} rows, treatment has {n}")
    if not np.all((w == 0) | (w == 1)):
        raise DataError("treatment must be 0/1")
    if not (w == 1).any() or not (w == 0).any():
        raise DataError("empty treatment arm")

    sds = _column_sds(z)
    scaled = z / sds if spec.standardize_columns else z
    caliper = spec.caliper_sd * sds if spec.caliper_sd is not None else None

    seeks = np.ones(n, dtype=bool) if spec.estimand == ATE else (w == 1)
    empty = np.empty(0, dtype=int)
    matches = [empty] * n

    for arm in (1, 0):
        sources = np.flatnonzero(seeks & (w == arm))
        targets = np.flatnonzero(w == 1 - arm)
        for start in range(0, sources.size, _CHUNK):
            chunk = sources[start:start + _CHUNK]
            d2 = ((scaled[chunk][:, None, :] - scaled[targets][None, :, :]) ** 2).sum(axis=-1)
            if caliper is not None:
                inside = np.all(np.abs(z[chunk][:, None, :] - z[targets][None, :, :]) <= caliper, axis=-1)
                d2[~inside] = np.inf
            order = np.argsort(d2, axis=1, kind="stable")[:, :spec.m]
            for row, i in enumerate(chunk):
                pick = order[row]
                pick = pick[np.isfinite(d2[row, pick])]
                matches[i] = targets[pick]

    used = np.concatenate([js for js in matches if js.size]) if any(js.size for js in matches) else empty
    usage = np.bincount(used, minlength=n)
    has_matches = np.array([js.size > 0 for js in matches])
    retained = seeks & has_matches
    weights = usage / spec.m + retained.astype(float)
    n_dropped = int((seeks & ~has_matches).sum())
    if n_dropped:
        logger.info("caliper dropped %d of %d units", n_dropped, int(seeks.sum()))
    for arr in (usage, weights, retained, w):
        arr.setflags(write=False)
    return MatchResult(tuple(matches), usage, weights, retained, n_dropped, spec, w)


def effective_sample(result: MatchResult) -> EffectiveSample:
    seeks = np.ones(result.n, dtype=bool) if result.spec.estimand == ATE else (result.w == 1)
    dropped = seeks & ~result.retained
    treated = result.w == 1
    return EffectiveSample(
        n_retained=int(result.retained.sum()),
        n_dropped=int(dropped.sum()),
        retained_treated=int((result.retained & treated).sum()),
        retained_control=int((result.retained & ~treated).sum()),
        dropped_treated=int((dropped & treated).sum()),
        dropped_control=int((dropped & ~treated).sum()),
    )
