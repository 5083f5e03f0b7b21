import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import shapley_by_permutations
from retentia.core import Construct, FeatureMatrix, survey_names
from retentia.evaluation import (NO_SIGNAL, RetentionDataset, paired_comparison, paired_comparisons,
                                 segment_filter, shap_values, stratified_kfold)
from retentia.gbt import GbtParams, train_gbt
from retentia.stats import roc_auc
from retentia.synthworld import WorldConfig, generate_world, retention_dataset

FAST = GbtParams(n_trees=40, max_depth=3, min_samples_leaf=20)


# -- folds ------------------------------------------------------------------------

def test_kfold_exact_divisibility():
    y = np.array([1] * 50 + [0] * 50)
    f = stratified_kfold(y, 10, seed=0)
    assert [int(y[f.folds == j].sum()) for j in range(10)] == [5] * 10


def test_kfold_remainder_and_determinism():
    y = np.array([1] * 51 + [0] * 50)
    f = stratified_kfold(y, 10, seed=3)
    pos = [int(y[f.folds == j].sum()) for j in range(10)]
    assert set(pos) <= {5, 6} and sum(pos) == 51
    assert np.array_equal(f.folds, stratified_kfold(y, 10, seed=3).folds)


def test_kfold_class_too_small():
    with pytest.raises(ValueError):
        stratified_kfold([1] * 5 + [0] * 50, 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 60), st.integers(10, 60), st.integers(2, 10), st.integers(0, 99))
def test_kfold_invariants(n_pos, n_neg, k, seed):
    y = np.array([1] * n_pos + [0] * n_neg)
    f = stratified_kfold(y, k, seed)
    sizes = np.bincount(f.folds, minlength=k)
    assert sizes.sum() == y.size and sizes.max() - sizes.min() <= 1
    rate = y.mean()
    for j in range(k):
        yj = y[f.folds == j]
        assert abs(yj.sum() - rate * yj.size) <= 1 + 1e-9


# -- paired comparison -------------------------------------------------------------

def _toy_dataset(n=1000, seed=0, duplicate=False):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n, 2))
    x = (rng.random(n) < 0.5).astype(float)
    y = (rng.random(n) < 1 / (1 + np.exp(-(h[:, 0] + 1.5 * x)))).astype(int)
    s_names = survey_names(Construct.RETENTIVE_RELEVANCE)
    S = np.zeros((n, len(s_names)))
    S[:, 0] = x
    base = np.column_stack([h, x]) if duplicate else h
    names = ("h_a", "h_b", "h_x")[: base.shape[1]] + s_names
    fm = FeatureMatrix(names, ("H",) * base.shape[1] + ("S",) * len(s_names), np.column_stack([base, S]))
    return RetentionDataset(fm, y, np.arange(n), np.abs(h[:, 1]))


def test_duplicated_signal_reports_no_incremental_signal():
    rep = paired_comparison(_toy_dataset(duplicate=True), ("H",), "rr", FAST, k=5, bootstrap_iterations=200)
    for m in rep.metrics.values():
        assert m.mean_delta == 0.0
        assert m.status == NO_SIGNAL and m.test is None


def test_survey_signal_is_detected():
    rep = paired_comparison(_toy_dataset(), ("H",), "rr", FAST, k=5, bootstrap_iterations=200)
    assert rep["roc_auc"].mean_delta > 0 and rep["roc_auc"].p_value < 0.01


def test_none_construct_gives_zero_deltas():
    rep = paired_comparison(_toy_dataset(), ("H",), None, FAST, k=5, bootstrap_iterations=200)
    assert all(d == 0 for m in rep.metrics.values() for d in m.delta)


def test_mean_delta_is_exact_fold_mean():
    rep = paired_comparison(_toy_dataset(), ("H",), "rr", FAST, k=5, bootstrap_iterations=200)
    for m in rep.metrics.values():
        d = np.array(m.augmented) - np.array(m.baseline)
        assert np.array_equal(d, np.array(m.delta))
        assert m.mean_delta == float(np.mean(d))
        assert m.ci_low <= m.mean_delta <= m.ci_high


@pytest.fixture(scope="module")
def world_dataset():
    world = generate_world(WorldConfig(n_users=10_000, n_items=500, seed=7))
    return retention_dataset(world)


def test_planted_rr_helps_and_wyt_does_not(world_dataset):
    reps = paired_comparisons(world_dataset, params=FAST, k=10, seed=1, bootstrap_iterations=200,
                              segments=("overall", "low_signal"))
    rr = reps[("RetentiveRelevance", "overall")]
    assert rr["accuracy"].mean_delta > 0 and rr["roc_auc"].mean_delta > 0
    assert rr["roc_auc"].p_value < 0.01 and rr["accuracy"].p_value < 0.01
    assert reps[("WorthYourTime", "overall")]["roc_auc"].p_value > 0.01
    assert set(reps) == {(c.value, s) for c in Construct for s in ("overall", "low_signal")}


def test_segments(world_dataset):
    ds = world_dataset
    assert segment_filter(ds, "overall").labels.tolist() == ds.labels.tolist()
    low = segment_filter(ds, "low_signal")
    assert (low.engagement_total < np.median(ds.engagement_total)).all()
    flat = RetentionDataset(ds.features.take(np.arange(10)), ds.labels[:10], ds.user_ids[:10], np.ones(10))
    assert len(segment_filter(flat, "low_signal")) == 0
    with pytest.raises(ValueError):
        segment_filter(ds, "mystery")
    # baseline discrimination is weaker for low-signal users
    cols = ds.columns_for(("H", "R", "U", "C", "D"))
    X = ds.features.columns(cols).values
    half = len(ds) // 2
    model = train_gbt(X[:half], ds.labels[:half], FAST)
    p = model.predict_proba(X[half:])[:, 1]
    y = ds.labels[half:]
    mask = ds.engagement_total[half:] < np.median(ds.engagement_total)
    assert roc_auc(p[mask], y[mask]) < roc_auc(p, y)


# -- Shapley values ------------------------------------------------------------------

def _tree_model(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(400, 3))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0.5)).astype(int)
    model = train_gbt(X, y, GbtParams(n_trees=1, learning_rate=1.0, max_depth=2, min_samples_leaf=5))
    return model, X


def test_exact_matches_subset_oracle_on_depth_two_tree():
    model, X = _tree_model()
    f = lambda Z: model.predict_proba(Z)[:, 1]
    for i in range(5):
        rep = shap_values(model, X[i], X[:30], mode="exact")
        assert np.allclose(rep.phi, shapley_by_permutations(f, X[i], X[:30]), atol=1e-12, rtol=0)
        assert rep.efficiency_gap <= 1e-9


def test_exact_efficiency_on_ensemble():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 6))
    y = (X[:, 0] + X[:, 1] * X[:, 2] + rng.normal(size=300) > 0).astype(int)
    model = train_gbt(X, y, GbtParams(n_trees=20, max_depth=3, min_samples_leaf=5))
    for i in range(10):
        assert shap_values(model, X[i], X[:20]).efficiency_gap <= 1e-9


def test_null_player_exactly_zero():
    model, X = _tree_model()
    unused = set(range(3)) - model.used_features()
    assert unused
    rep = shap_values(model, X[3], X[:25])
    for j in unused:
        assert rep.phi[j] == 0.0


def test_constant_model_gives_zero_attributions():
    rep = shap_values(lambda Z: np.full(len(Z), 0.3), [1.0, 2.0, 3.0], np.zeros((4, 3)))
    assert np.array_equal(rep.phi, np.zeros(3))


def test_symmetry_axiom():
    rep = shap_values(lambda Z: Z[:, 0] + Z[:, 1], [1.0, 1.0], [[0.0, 0.0], [2.0, 2.0], [-1.0, -1.0]])
    assert rep.phi[0] == pytest.approx(rep.phi[1], abs=1e-15)


def test_sampled_mode_efficiency_and_accuracy():
    model, X = _tree_model()
    exact = shap_values(model, X[0], X[:20], mode="exact")
    samp = shap_values(model, X[0], X[:20], mode="sampled", n_permutations=2000, seed=3)
    assert samp.efficiency_gap <= 0.01
    assert np.allclose(samp.phi, exact.phi, atol=0.05)


def test_mode_limits():
    with pytest.raises(ValueError, match="sampled"):
        shap_values(lambda Z: Z.sum(1), np.zeros(16), np.zeros((2, 16)))
    with pytest.raises(ValueError, match="2000"):
        shap_values(lambda Z: Z.sum(1), np.zeros(3), np.zeros((2, 3)), mode="sampled", n_permutations=10)
    with pytest.raises(ValueError, match="non-empty"):
        shap_values(lambda Z: Z.sum(1), np.zeros(3), np.zeros((0, 3)))
