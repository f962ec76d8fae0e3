import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import rankdata

from decon.stats import cohens_d, cohens_d_from_summary, compare, signed_rank_null, wilcoxon_signed_rank

samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=8)


def brute_force_p(diffs):
    d = np.asarray([x for x in diffs if x != 0], dtype=np.float64)
    ranks = rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    totals = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product([0, 1], repeat=len(d))]
    totals = np.array(totals)
    lower = np.mean(totals <= observed + 1e-9)
    upper = np.mean(totals >= observed - 1e-9)
    return min(1.0, 2 * min(lower, upper))


def test_cohens_d_identical_groups():
    assert cohens_d([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0


def test_cohens_d_hand_value():
    # means 2 and 1, both sample variances 1 -> d = 1
    assert cohens_d([1.0, 2.0, 3.0], [0.0, 1.0, 2.0]) == pytest.approx(1.0)


def test_cohens_d_published_summary():
    d = cohens_d_from_summary(41.18, 0.15, 3, 40.81, 0.16, 3)
    assert d == pytest.approx(0.37 / math.sqrt((0.15**2 + 0.16**2) / 2), rel=1e-12)
    assert 2.25 <= d <= 2.49


def test_cohens_d_degenerate():
    with pytest.raises(ValueError):
        cohens_d([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(ValueError):
        cohens_d([1.0], [2.0, 3.0])


@given(samples, samples)
def test_cohens_d_antisymmetric(a, b):
    try:
        d = cohens_d(a, b)
    except ValueError:
        return
    assert cohens_d(b, a) == pytest.approx(-d, rel=1e-9, abs=1e-12)


@given(samples, samples, st.floats(-50, 50), st.floats(0.1, 10))
def test_cohens_d_affine_invariant(a, b, shift, scale):
    try:
        d = cohens_d(a, b)
    except ValueError:
        return
    if not np.isfinite(d) or abs(d) > 1e6:
        return
    moved = cohens_d([scale * x + shift for x in a], [scale * x + shift for x in b])
    assert moved == pytest.approx(d, rel=1e-6, abs=1e-6)


def test_wilcoxon_examples():
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5]) == pytest.approx(2 / 32)
    assert wilcoxon_signed_rank([-1, -2, -3, -4, -5]) == pytest.approx(2 / 32)
    assert wilcoxon_signed_rank([0.7, -0.7]) == 1.0
    assert wilcoxon_signed_rank([0, 0, 1]) == 1.0
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([0.0, 0.0])


def test_null_distribution_sums_to_one():
    support, probs = signed_rank_null([1, 2, 3, 4])
    assert probs.sum() == pytest.approx(1.0)
    assert support[0] == 0 and support[-1] == 10
    assert probs[0] == 1 / 16


@pytest.mark.parametrize("n", range(1, 13))
def test_wilcoxon_matches_enumeration(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        # integer magnitudes make ties common
        diffs = rng.integers(-4, 5, size=n).astype(float)
        if not np.any(diffs):
            continue
        assert wilcoxon_signed_rank(diffs) == pytest.approx(brute_force_p(diffs), abs=1e-12)


@pytest.mark.parametrize("n", [15, 18, 20])
def test_normal_approximation_close_to_exact(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(5):
        diffs = rng.normal(0.3, 1.0, size=n)
        exact = wilcoxon_signed_rank(diffs)
        approx = wilcoxon_signed_rank(diffs, exact_max_n=0)
        assert approx == pytest.approx(exact, abs=0.02)


@given(st.lists(st.floats(-10, 10, allow_nan=False).filter(lambda x: x != 0), min_size=1, max_size=14))
def test_wilcoxon_sign_flip_invariant(diffs):
    p = wilcoxon_signed_rank(diffs)
    assert 0 < p <= 1
    assert wilcoxon_signed_rank([-x for x in diffs]) == pytest.approx(p, abs=1e-12)


def test_compare_report():
    r = compare([0.5, 0.6, 0.7], [0.4, 0.5, 0.6])
    assert r.cohens_d == pytest.approx(1.0)
    assert r.wilcoxon_p == pytest.approx(0.25)
    with pytest.raises(ValueError):
        compare([1.0, 2.0], [1.0, 2.0, 3.0])
