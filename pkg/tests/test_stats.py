import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import auc_pairwise, mutual_information_counts
from retentia.stats import (accuracy, bootstrap_ci, bootstrap_diff_ci, cohens_d_independent, cohens_d_paired,
                            entropy, equal_frequency_codes, fisher_z_compare, log_loss, mutual_information,
                            paired_t_test, pearson_r, roc_auc, significance_stars, two_sample_t_test)


# -- correlation -------------------------------------------------------------

def test_pearson_perfect_line():
    x = np.arange(10.0)
    res = pearson_r(x, 2 * x + 1)
    assert res.r == pytest.approx(1.0)
    assert res.p_value == 0.0


def test_pearson_independent_normals_small():
    rng = np.random.default_rng(0)
    res = pearson_r(rng.normal(size=10_000), rng.normal(size=10_000))
    assert abs(res.r) < 0.05
    assert res.ci_low <= res.r <= res.ci_high


def test_pearson_planted_063():
    rng = np.random.default_rng(1)
    x = rng.normal(size=10_000)
    y = 0.63 * x + math.sqrt(1 - 0.63 ** 2) * rng.normal(size=10_000)
    assert abs(pearson_r(x, y).r - 0.63) < 0.03


def test_pearson_zero_variance():
    with pytest.raises(ValueError, match="zero variance"):
        pearson_r([1, 1, 1, 1, 1], [1, 2, 3, 4, 5])


def test_pearson_ci_matches_fisher_interval():
    rng = np.random.default_rng(2)
    x = rng.normal(size=200)
    y = x + rng.normal(size=200)
    res = pearson_r(x, y)
    z = math.atanh(res.r)
    assert math.tanh(z - 1.959963984540054 / math.sqrt(197)) == pytest.approx(res.ci_low, abs=1e-12)


# -- Fisher z -----------------------------------------------------------------

def test_fisher_identity():
    res = fisher_z_compare(0.4, 100, 0.4, 300)
    assert res.statistic == 0.0
    assert res.p_value == 1.0


def test_fisher_reference_comparison_exceeds_258():
    assert fisher_z_compare(0.69, 2000, 0.51, 2000).statistic > 2.58


def test_fisher_hand_computation():
    # atanh(0.5) * sqrt(50), computed by hand
    assert fisher_z_compare(0.5, 103, 0.0, 103).statistic == pytest.approx(3.884180996060466, rel=1e-12)


def test_fisher_rejects_unit_correlation():
    with pytest.raises(ValueError):
        fisher_z_compare(1.0, 10, 0.2, 10)


@given(r1=st.floats(-0.95, 0.95), r2=st.floats(-0.95, 0.95), n=st.integers(4, 10_000))
def test_fisher_antisymmetric(r1, r2, n):
    a = fisher_z_compare(r1, n, r2, n).statistic
    b = fisher_z_compare(r2, n, r1, n).statistic
    assert a == -b


# -- mutual information ------------------------------------------------------------

def test_mi_independent_binary():
    rng = np.random.default_rng(3)
    x = rng.integers(0, 2, 100_000)
    y = rng.integers(0, 2, 100_000)
    assert mutual_information(x, y) < 1e-3


def test_mi_self_is_ln2():
    rng = np.random.default_rng(4)
    x = rng.integers(0, 2, 100_000)
    assert mutual_information(x, x) == pytest.approx(math.log(2), abs=1e-3)
    assert entropy(x) == pytest.approx(mutual_information(x, x), abs=1e-12)


def test_mi_matches_counting_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=3000)
    y = 0.5 * x + rng.normal(size=3000)
    cx = equal_frequency_codes(x, 5).tolist()
    cy = equal_frequency_codes(y, 4).tolist()
    assert mutual_information(x, y, 5, 4) == pytest.approx(mutual_information_counts(cx, cy), abs=1e-12)


def test_equal_frequency_codes_balanced():
    codes = equal_frequency_codes(np.arange(100.0), 5)
    assert np.bincount(codes).tolist() == [20] * 5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=200), st.data())
def test_mi_symmetric_nonnegative(xs, data):
    ys = data.draw(st.lists(st.integers(0, 4), min_size=len(xs), max_size=len(xs)))
    a = mutual_information(xs, ys, 4, 3)
    assert a >= 0
    assert a == mutual_information(ys, xs, 3, 4)


# -- bootstrap ---------------------------------------------------------------------

def test_bootstrap_constant_zero_width():
    lo, hi = bootstrap_ci(np.full(50, 3.5), iterations=200)
    assert lo == hi == 3.5


def test_bootstrap_deterministic():
    x = np.random.default_rng(6).normal(size=100)
    assert bootstrap_ci(x, seed=9) == bootstrap_ci(x, seed=9)


def test_bootstrap_iterations_floor():
    with pytest.raises(ValueError):
        bootstrap_ci([1.0, 2.0], iterations=50)


def test_bootstrap_coverage():
    hits = 0
    for rep in range(100):
        x = np.random.default_rng(1000 + rep).normal(size=1000)
        lo, hi = bootstrap_ci(x, iterations=200, seed=rep)
        hits += lo <= 0.0 <= hi
    assert hits >= 93


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=40), st.integers(0, 1000))
def test_bootstrap_nested_levels(xs, seed):
    lo90, hi90 = bootstrap_ci(xs, iterations=100, level=0.90, seed=seed)
    lo95, hi95 = bootstrap_ci(xs, iterations=100, level=0.95, seed=seed)
    assert lo95 <= lo90 and hi90 <= hi95


def test_bootstrap_diff_ci_brackets_difference():
    rng = np.random.default_rng(7)
    a = rng.normal(1.0, 1.0, 2000)
    b = rng.normal(0.0, 1.0, 2000)
    lo, hi = bootstrap_diff_ci(a, b, iterations=300)
    assert lo < a.mean() - b.mean() < hi
    assert lo > 0.8 and hi < 1.2


# -- t-tests and effect sizes -----------------------------------------------------------

def test_paired_identical_raises():
    with pytest.raises(ValueError, match="zero variance"):
        paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


def test_paired_constant_shift_raises():
    with pytest.raises(ValueError):
        paired_t_test([1, 2, 3, 4], [0, 1, 2, 3])


def test_paired_hand_oracle():
    a = [2.1, 1.9, 2.2, 2.0, 1.8]
    b = [1.0, 1.1, 0.9, 1.2, 0.8]
    res = paired_t_test(a, b)
    # differences [1.1, 0.8, 1.3, 0.8, 1.0]: mean 1.0, sd sqrt(0.045)
    assert res.statistic == pytest.approx(10.5409255338946, rel=1e-12)
    assert res.p_value == pytest.approx(0.00045816064910749463, rel=1e-9)
    assert res.df == 4
    assert cohens_d_paired(a, b) == pytest.approx(4.714045207910317, rel=1e-12)


def test_two_sample_hand_oracle():
    a = np.array([5.0, 6.0, 7.0, 8.0])
    b = np.array([1.0, 2.0, 3.0])
    res = two_sample_t_test(a, b)
    sp = math.sqrt((3 * (5 / 3) + 2 * 1.0) / 5)
    t = (6.5 - 2.0) / (sp * math.sqrt(1 / 4 + 1 / 3))
    assert res.statistic == pytest.approx(t, rel=1e-12)
    assert cohens_d_independent(a, b) == pytest.approx(4.5 / sp, rel=1e-12)
    assert res.ci_low <= 4.5 <= res.ci_high


def test_two_sample_needs_two_rows():
    with pytest.raises(ValueError):
        two_sample_t_test([1.0], [1.0, 2.0])


# -- classification metrics ---------------------------------------------------------------

def test_perfect_separation():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert accuracy([0.1, 0.9], [0, 1]) == 1.0


def test_auc_all_ties():
    assert roc_auc(np.full(10, 0.3), [0, 1] * 5) == 0.5


def test_auc_single_class():
    with pytest.raises(ValueError):
        roc_auc([0.2, 0.4], [1, 1])


def test_auc_matches_pairwise_oracle_n500():
    rng = np.random.default_rng(8)
    s = np.round(rng.random(500), 2)  # rounding forces ties
    y = rng.integers(0, 2, 500)
    assert roc_auc(s, y) == auc_pairwise(s.tolist(), y.tolist())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_negation_and_monotone_transform(pairs):
    s = np.array([p[0] / 10 for p in pairs])
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    a = roc_auc(s, y)
    assert roc_auc(-s, y) == pytest.approx(1 - a, abs=1e-12)
    assert roc_auc(np.exp(s), y) == pytest.approx(a, abs=1e-12)


def test_log_loss_value():
    assert log_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2))


def test_significance_stars():
    assert significance_stars(0.0005) == "***"
    assert significance_stars(0.005) == "**"
    assert significance_stars(0.03) == "*"
    assert significance_stars(0.2) == ""
    assert significance_stars(None) == ""
