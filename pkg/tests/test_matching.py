import logging

import numpy as np
import pytest

from modules.errors import DataError
from modules.matching import ATT, MatchSpec, build_matches, effective_sample
from modules.scores import ScoreSet


def brute_force_matches(z, w, m, caliper_sd, att=False):
    """All-pairs enumeration: sort candidates by (distance, index), keep admissible, take m."""
    sds = z.std(axis=0, ddof=1)
    sds[~(sds > 0)] = 1.0
    scaled = z / sds
    out = []
    for i in range(len(w)):
        if att and w[i] == 0:
            out.append([])
            continue
        candidates = []
        for j in range(len(w)):
            if w[j] == w[i]:
                continue
            if caliper_sd is not None and np.any(np.abs(z[i] - z[j]) > caliper_sd * sds):
                continue
            d2 = float(((scaled[i] - scaled[j]) ** 2).sum())
            candidates.append((d2, j))
        candidates.sort()
        out.append([j for _, j in candidates[:m]])
    return out


def test_matches_equal_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(4, 101))
        k = int(rng.integers(1, 3))
        w = (rng.uniform(size=n) < 0.4).astype(int)
        w[0], w[1] = 1, 0
        z = rng.standard_normal((n, k))
        m = int(rng.integers(1, 4))
        caliper = [None, 0.5, 0.2][int(rng.integers(0, 3))]
        att = bool(rng.integers(0, 2))
        spec = MatchSpec(m=m, caliper_sd=caliper, estimand=ATT if att else "ATE")
        result = build_matches(z, w, spec)
        expected = brute_force_matches(z, w, m, caliper, att)
        assert [list(js) for js in result.matches] == expected


def test_ties_go_to_smaller_index():
    z = np.array([0.0, 1.0, -1.0, 1.0])
    w = np.array([1, 0, 0, 0])
    result = build_matches(z, w, MatchSpec(m=1))
    assert list(result.matches[0]) == [1]
    result = build_matches(z, w, MatchSpec(m=2))
    assert list(result.matches[0]) == [1, 2]


def test_pair_weights():
    result = build_matches(np.array([0.2, 0.4]), np.array([1, 0]))
    np.testing.assert_array_equal(result.usage_count, [1, 1])
    np.testing.assert_array_equal(result.weights, [2.0, 2.0])
    assert result.n_dropped == 0


def test_weights_count_reuse():
    # unit 2 is the nearest control for both treated units
    z = np.array([0.0, 0.1, 0.04, 5.0])
    w = np.array([1, 1, 0, 0])
    result = build_matches(z, w, MatchSpec(m=1))
    assert [list(js) for js in result.matches] == [[2], [2], [0], [1]]
    np.testing.assert_array_equal(result.usage_count, [1, 1, 2, 0])
    np.testing.assert_array_equal(result.weights, [2.0, 2.0, 3.0, 1.0])


def test_att_only_treated_seek_matches():
    z = np.array([0.0, 1.0, 0.1, 0.9, 3.0])
    w = np.array([1, 1, 0, 0, 0])
    result = build_matches(z, w, MatchSpec(estimand=ATT))
    assert not result.retained[w == 0].any()
    assert all(result.matches[i].size == 0 for i in np.flatnonzero(w == 0))
    np.testing.assert_array_equal(result.weights[w == 1], [1.0, 1.0])
    np.testing.assert_array_equal(result.weights[w == 0], [1.0, 1.0, 0.0])


def test_caliper_drops_far_units():
    z = np.array([0.0, 0.1, 0.05, 0.15, 10.0])
    w = np.array([1, 0, 1, 0, 1])
    result = build_matches(z, w, MatchSpec(caliper_sd=0.5))
    assert not result.retained[4]
    assert result.matches[4].size == 0
    counts = effective_sample(result)
    assert counts.n_retained + counts.n_dropped == 5
    assert counts.dropped_treated >= 1
    assert counts.retained_treated + counts.dropped_treated == 3


def test_m_larger_than_opposite_arm():
    z = np.array([0.0, 1.0, 2.0])
    w = np.array([1, 0, 1])
    result = build_matches(z, w, MatchSpec(m=3))
    assert list(result.matches[1]) == [0, 2]
    assert list(result.matches[0]) == [1]


def test_zero_variance_column_is_scaled_by_one(caplog):
    scores = ScoreSet.from_arrays(propensity=[0.5, 0.5, 0.5, 0.5], prognostic=[0.0, 1.0, 0.2, 0.9])
    with caplog.at_level(logging.WARNING, logger="modules.matching"):
        result = build_matches(scores, [1, 1, 0, 0])
    assert "zero variance" in caplog.text
    assert list(result.matches[0]) == [2]
    assert list(result.matches[1]) == [3]


def test_unstandardized_distance_uses_raw_scale():
    z = np.column_stack([[0.0, 0.0, 3.0, 30.0], [0.0, 1.0, 0.0, 1.0]])
    w = np.array([1, 0, 0, 0])
    assert list(build_matches(z, w, MatchSpec(standardize_columns=False)).matches[0]) == [1]
    assert list(build_matches(z, w, MatchSpec(standardize_columns=True)).matches[0]) == [2]


def test_invalid_inputs():
    with pytest.raises(ValueError):
        MatchSpec(m=0)
    with pytest.raises(ValueError):
        MatchSpec(caliper_sd=0.0)
    with pytest.raises(DataError):
        build_matches(np.array([0.0, 1.0]), np.array([1, 1]))
    with pytest.raises(DataError):
        build_matches(np.array([0.0, np.inf]), np.array([1, 0]))


def test_match_counts_balance_across_arms(rng):
    for _ in range(50):
        n = int(rng.integers(4, 80))
        w = (rng.uniform(size=n) < 0.5).astype(int)
        w[0], w[1] = 1, 0
        z = rng.standard_normal((n, 2))
        spec = MatchSpec(m=int(rng.integers(1, 4)), caliper_sd=[None, 0.3][int(rng.integers(0, 2))])
        result = build_matches(z, w, spec)
        for arm in (1, 0):
            given = sum(result.matches[i].size for i in np.flatnonzero(w == arm))
            assert given == result.usage_count[w == 1 - arm].sum()


def test_relabelling_units_permutes_matches(rng):
    n = 40
    z = rng.standard_normal((n, 2))
    w = (rng.uniform(size=n) < 0.5).astype(int)
    w[0], w[1] = 1, 0
    base = build_matches(z, w, MatchSpec(m=2, caliper_sd=0.5))
    perm = rng.permutation(n)
    moved = build_matches(z[perm], w[perm], MatchSpec(m=2, caliper_sd=0.5))
    # continuous scores leave no distance ties, so only the labels change
    for new_i, old_i in enumerate(perm):
        assert sorted(perm[moved.matches[new_i]].tolist()) == sorted(base.matches[old_i].tolist())
    np.testing.assert_array_equal(moved.weights, base.weights[perm])
    np.testing.assert_array_equal(moved.retained, base.retained[perm])
