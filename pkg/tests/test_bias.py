import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import root
from scipy.special import expit

from oracles import smd
from retentia.bias import CBPS, ConvergenceError, balance_report, compute_smd, fit_cbps, trim_and_weight, weight_frame
from retentia.synthworld import WorldConfig, generate_world, planted_logistic_sample


def _moment_oracle(X, Z):
    A = np.column_stack([np.ones(len(Z)), X])
    sol = root(lambda th: A.T @ (Z - expit(A @ th)) / len(Z), np.zeros(A.shape[1]), tol=1e-14)
    assert sol.success
    return sol.x


def test_cbps_matches_root_finder():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2000, 3)) * [1.0, 2.0, 0.5] + [0.0, 1.0, -1.0]
    Z = (rng.random(2000) < expit(0.3 + X @ [0.5, -0.2, 0.8])).astype(int)
    m = fit_cbps(X, Z)
    theta = _moment_oracle(X, Z)
    assert m.intercept == pytest.approx(theta[0], abs=1e-6)
    assert np.allclose(m.coefficients, theta[1:], atol=1e-6)
    assert m.estimator.residual_ <= 1e-8
    assert m.estimator.moment_residual(X, Z) <= 1e-8


def test_cbps_independent_response_is_constant():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10_000, 2))
    Z = np.tile([0, 1], 5000)
    rng.shuffle(Z)
    m = fit_cbps(X, Z)
    # equal class counts and coefficients near zero
    assert np.abs(m.estimator.standardized_coef_).max() < 0.03
    p = m.predict(X)
    assert abs(p.mean() - 0.5) < 1e-9
    assert np.abs(p - 0.5).max() < 0.05


def test_cbps_exactly_balanced_design_gives_zero_coefficients():
    X = np.repeat(np.array([[-1.0], [1.0]]), 2000, axis=0)
    Z = np.tile([0, 1], 2000)
    m = fit_cbps(X, Z)
    assert abs(m.coefficients[0]) < 1e-3
    assert np.allclose(m.predict(X), 0.5)


def test_cbps_recovers_planted_coefficients():
    X, Z = planted_logistic_sample(50_000, [0.8, -0.5], 0.2, seed=3)
    m = fit_cbps(X, Z)
    assert np.allclose(m.coefficients, [0.8, -0.5], atol=0.05)


def test_cbps_single_class_and_small_n():
    with pytest.raises(ValueError, match="single-class"):
        fit_cbps(np.zeros((10, 1)) + np.arange(10)[:, None], np.ones(10))
    with pytest.raises(ValueError, match="more rows"):
        fit_cbps(np.eye(2), [0, 1])


def test_cbps_iteration_cap_reports_residual():
    X, Z = planted_logistic_sample(2000, [2.0], 0.0, seed=1)
    with pytest.raises(ConvergenceError) as info:
        CBPS(max_iter=1).fit(X, Z)
    assert info.value.residual > 1e-8


def test_cbps_payload_round_trip():
    X, Z = planted_logistic_sample(3000, [0.5, 0.1], -0.2, seed=2)
    est = CBPS().fit(X, Z, ["a", "b"])
    again = CBPS.from_payload(est.to_payload(), ["a", "b"])
    assert np.array_equal(again.predict_proba(X), est.predict_proba(X))
    assert est.get_params() == {"tol": 1e-8, "max_iter": 100}


# -- SMD --------------------------------------------------------------------------

def test_smd_examples():
    g = np.array([1] * 4 + [0] * 4)
    assert compute_smd([1, 2, 3, 4, 1, 2, 3, 4], g) == 0
    a = np.array([-1.0, 1.0, -1.0, 1.0])
    x = np.concatenate([a * np.sqrt(3 / 4) + 1.0, a * np.sqrt(3 / 4)])  # sample sd 1 in both groups
    assert compute_smd(x, g) == pytest.approx(1.0)


def test_smd_degenerate():
    with pytest.raises(ValueError, match="degenerate covariate"):
        compute_smd([2, 2, 2, 2], [1, 1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans(), st.integers(1, 5)), min_size=6, max_size=40))
def test_smd_antisymmetric_and_matches_oracle(rows):
    x = np.array([r[0] for r in rows], float)
    g = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows], float)
    if g.sum() < 2 or (~g).sum() < 2 or x[g].var() + x[~g].var() == 0:
        return
    a = compute_smd(x, g, w)
    assert a == pytest.approx(-compute_smd(x, ~g, w), abs=1e-12)
    assert a == pytest.approx(smd(x.tolist(), g.tolist(), w.tolist()), abs=1e-9)


# -- trimming ---------------------------------------------------------------------

def test_trim_examples():
    s = trim_and_weight([0.05, 0.5, 0.95], [1, 1, 1], (0.1, 0.9))
    assert [x.trimmed for x in s] == [True, False, True]
    assert [x.weight for x in s] == [0.0, 2.0, 0.0]
    s = trim_and_weight([0.25, 0.3, 0.6], [1, 0, 1])
    assert sum(x.trimmed for x in s) == 0
    assert s[0].weight == 4.0
    assert s[1].weight == 0.0 and s[1].propensity == 0.3


def test_trim_bounds_validation():
    with pytest.raises(ValueError):
        weight_frame([0.5], [1], (0.9, 0.1))


@given(st.lists(st.tuples(st.floats(1e-6, 1 - 1e-6), st.booleans()), min_size=1, max_size=60),
       st.floats(0, 0.49), st.floats(0.51, 1))
def test_weights_finite_nonnegative(rows, lo, hi):
    f = weight_frame([r[0] for r in rows], [r[1] for r in rows], (lo, hi))
    assert np.isfinite(f.weight).all() and (f.weight >= 0).all()
    assert ((f.weight == 0) | ~f.trimmed).all()
    assert ((f.weight == 0) == (f.trimmed | ~f.responded)).all()


# -- planted nonresponse ----------------------------------------------------------

def _biased_world(n):
    cfg = WorldConfig(n_users=n, n_items=200, history_days=2, seed=11, response_rate=0.5,
                      nonresponse_coefs={"age_cohort": -0.3, "region": 0.0, "tenure_days": 1.2})
    w = generate_world(cfg)
    X, names = w.nonresponse_covariates()
    return X, w.responded, names


def test_planted_bias_balanced_after_weighting():
    X, Z, names = _biased_world(20_000)
    m = fit_cbps(X, Z, names)
    frame = weight_frame(m.predict(X), Z, (0.1, 0.9))
    rep = balance_report(X, Z, frame, names)
    by = {b["covariate"]: b for b in rep["balance"]}
    assert abs(by["tenure_days"]["smd_unweighted"]) > 0.3
    assert all(abs(b["smd_weighted"]) < 0.1 and b["passed"] for b in rep["balance"])


def test_weighted_means_converge_with_n():
    errs = []
    for n in (1_000, 10_000):
        X, Z, _ = _biased_world(n)
        f = weight_frame(fit_cbps(X, Z).predict(X), Z, (0.0, 1.0))
        wm = (f.weight[:, None] * X).sum(0) / f.weight.sum()
        errs.append(np.abs((wm - X.mean(0)) / X.std(0)).max())
    assert errs[1] < errs[0]
