import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import best_stump, central_difference, mean_logloss
from retentia import gbt
from retentia.core import FeatureVector
from retentia.gbt import (GbtParams, GradientBoostedTreesClassifier, logloss_from_margin, logloss_grad_hess,
                          predict_proba, train_gbt)
from retentia.stats import log_loss
from retentia.synthworld import WorldConfig, generate_world, retention_dataset
from retentia.validation import SchemaMismatchError


def _data(n=600, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    y = (rng.random(n) < 1 / (1 + np.exp(-(1.5 * X[:, 0] - X[:, 1] * X[:, 2])))).astype(int)
    return X, y


def test_gradient_and_hessian_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.normal(scale=3, size=6)
        y = rng.integers(0, 2, 6).astype(float)
        g, h = logloss_grad_hess(m, y)
        # loss is the mean, so the per-row derivative is scaled by n
        fd = central_difference(lambda mm: logloss_from_margin(mm, y) * y.size, m)
        assert np.allclose(-g, fd, rtol=1e-6, atol=1e-9)
        fd_h = central_difference(lambda mm: -logloss_grad_hess(mm, y)[0][0], m)[0]
        assert h[0] == pytest.approx(fd_h, rel=1e-6)
        assert logloss_from_margin(m, y) == pytest.approx(mean_logloss(m, y), rel=1e-12)


def test_probe_mode_predicts_prevalence():
    X, y = _data()
    model = train_gbt(X, y, GbtParams(n_trees=0))
    assert np.allclose(model.predict_proba(X)[:, 1], y.mean())
    assert model.trees_ == []


def test_separable_data_fits_perfectly():
    x = np.linspace(-1, 1, 200)[:, None]
    y = (x[:, 0] > 0.13).astype(int)
    model = train_gbt(x, y, GbtParams(n_trees=20, max_depth=2, min_samples_leaf=5))
    assert (model.predict(x) == y).all()
    assert len(model.trees_) == 20


def test_training_loss_non_increasing():
    X, y = _data()
    model = train_gbt(X, y, GbtParams(n_trees=40, learning_rate=1.0, max_depth=3, min_samples_leaf=2, l2_leaf=0))
    losses = np.array(model.train_loss_)
    assert (np.diff(losses) <= 0).all()


def test_beats_prevalence_on_synthworld_holdout():
    world = generate_world(WorldConfig(n_users=6000, n_items=300, seed=4))
    ds = retention_dataset(world)
    X, y = ds.features.values, ds.labels
    half = len(y) // 2
    model = train_gbt(X[:half], y[:half], GbtParams(n_trees=60, max_depth=3))
    p = model.predict_proba(X[half:])[:, 1]
    prevalence = np.full(len(y) - half, y[:half].mean())
    assert log_loss(p, y[half:]) < log_loss(prevalence, y[half:])


def test_clamp_keeps_predictions_inside_unit_interval():
    x = np.array([[0.0]] * 10 + [[1.0]] * 10)
    y = np.array([0] * 10 + [1] * 10)
    model = train_gbt(x, y, GbtParams(n_trees=200, learning_rate=1.0, max_depth=1, min_samples_leaf=1, l2_leaf=0))
    p = model.predict_proba(x)[:, 1]
    assert (p > 1e-7).all() and (p < 1 - 1e-7).all()
    assert np.abs(model.decision_function(x)).max() <= 15.0


def test_predict_is_deterministic():
    X, y = _data()
    a = train_gbt(X, y, GbtParams(n_trees=15))
    b = train_gbt(X, y, GbtParams(n_trees=15))
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X))
    assert predict_proba(a, X[0]) == predict_proba(a, X[0])


def test_huge_l2_collapses_to_prevalence():
    X, y = _data()
    model = train_gbt(X, y, GbtParams(n_trees=10, l2_leaf=1e12))
    assert np.allclose(model.predict_proba(X)[:, 1], y.mean(), atol=1e-9)


def test_stump_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    x = np.round(rng.normal(size=80), 1)
    y = (rng.random(80) < 1 / (1 + np.exp(-2 * x))).astype(int)
    lam, min_leaf = 1.0, 5
    model = train_gbt(x[:, None], y, GbtParams(n_trees=1, learning_rate=1.0, max_depth=1,
                                               min_samples_leaf=min_leaf, l2_leaf=lam))
    g, h = logloss_grad_hess(np.full(80, model.base_score_), y.astype(float))
    gain, thr = best_stump(x.tolist(), g.tolist(), h.tolist(), lam, min_leaf)
    tree = model.trees_[0]
    assert tree.feature[0] == 0
    # the model stores the left-side value; the oracle stores a midpoint
    assert ((x <= tree.threshold[0]) == (x <= thr)).all()
    left = x <= thr
    assert tree.value[tree.left[0]] == pytest.approx(g[left].sum() / (h[left].sum() + lam), rel=1e-10)


def test_histogram_and_sorted_paths_agree(monkeypatch):
    X, y = _data(400, seed=5)
    params = GbtParams(n_trees=10, max_depth=3, min_samples_leaf=5)
    monkeypatch.setattr(gbt, "MAX_HIST_BINS", 10 ** 9)
    hist = train_gbt(X, y, params)
    monkeypatch.setattr(gbt, "MAX_HIST_BINS", 0)
    exact = train_gbt(X, y, params)
    assert np.allclose(hist.predict_proba(X), exact.predict_proba(X), rtol=0, atol=1e-12)


def test_column_permutation_invariance():
    X, y = _data()
    names = ["a", "b", "c", "d"]
    model = train_gbt(X, y, GbtParams(n_trees=10), feature_names=names)
    perm = [2, 0, 3, 1]
    fv = FeatureVector([names[i] for i in perm], ["H"] * 4, X[7, perm])
    assert predict_proba(model, fv) == predict_proba(model, X[7])
    with pytest.raises(SchemaMismatchError):
        predict_proba(model, FeatureVector(["a", "b", "c", "z"], ["H"] * 4, X[7]))


def test_payload_round_trip():
    X, y = _data()
    model = train_gbt(X, y, GbtParams(n_trees=8))
    payload = json.loads(json.dumps(model.to_payload()))
    again = GradientBoostedTreesClassifier.from_payload(payload, model.feature_schema_)
    assert np.array_equal(again.predict_proba(X), model.predict_proba(X))
    assert "leaf_value" in json.dumps(payload["trees"][0]) and "threshold" in json.dumps(payload["trees"][0])


def test_validation_errors():
    X, y = _data()
    with pytest.raises(ValueError, match="single-class"):
        train_gbt(X, np.zeros(len(y), int))
    with pytest.raises(ValueError, match="min_samples_leaf"):
        train_gbt(X[:10], y[:10], GbtParams(min_samples_leaf=20))
    with pytest.raises(ValueError):
        GbtParams(max_depth=0)


def test_sklearn_get_params():
    est = GradientBoostedTreesClassifier(n_trees=3)
    assert est.get_params()["n_trees"] == 3
    assert est.set_params(max_depth=2).max_depth == 2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_predictions_strictly_inside_unit_interval(seed):
    X, y = _data(120, seed)
    if y.min() == y.max():
        return
    p = train_gbt(X, y, GbtParams(n_trees=5, min_samples_leaf=3)).predict_proba(X)[:, 1]
    assert ((p > 0) & (p < 1)).all()
