import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retentia.proxy import ThresholdPair, calibrate_thresholds, train_proxy
from retentia.ranking import (AB_METRICS, ExperimentContext, RankingPolicy, ab_simulate, assign_arms, boost,
                              demote, rank_scores, rank_slate, rescore, slate_order)
from retentia.synthworld import WorldConfig, generate_world, proxy_dataset

REFERENCE_TAUS = ThresholdPair(0.76, 0.38, 0.8, 0.6, 100)


def policy(alpha=0.5, beta=0.5, taus=REFERENCE_TAUS):
    return RankingPolicy(alpha, beta, taus)


# -- boost and demote examples ------------------------------------------------------

def test_boost_examples():
    assert boost(0.80, policy()) == 0.5
    assert boost(0.76, policy()) == 0.0
    assert boost(0.50, policy()) == 0.0


def test_demote_examples():
    assert demote(0.30, policy()) == pytest.approx(-0.04, abs=1e-15)
    assert demote(0.38, policy()) == 0.0
    assert demote(0.50, policy()) == 0.0
    a, b = demote(0.10, policy()), demote(0.20, policy())
    # gaps 0.28 and 0.18 at beta 0.5
    assert a == pytest.approx(-0.14) and b == pytest.approx(-0.09)
    assert a < b


def test_policy_validation_and_round_trip():
    with pytest.raises(ValueError):
        RankingPolicy(-1.0, 0.5, REFERENCE_TAUS)
    with pytest.raises(ValueError):
        RankingPolicy(0.5, 1.0, REFERENCE_TAUS)
    p = policy(0.2, 0.3)
    assert RankingPolicy.from_dict(p.to_dict()) == p
    assert p.disabled().alpha == 0 and p.disabled().beta == 0


def test_alpha_from_base_score_iqr():
    base = np.arange(1, 101) / 100
    p = RankingPolicy.from_base_scores(base, REFERENCE_TAUS)
    assert p.alpha == pytest.approx(0.5 * (np.percentile(base, 75) - np.percentile(base, 25)))
    with pytest.raises(ValueError, match="interquartile"):
        RankingPolicy.from_base_scores(np.ones(10), REFERENCE_TAUS)


# -- slate examples -------------------------------------------------------------------

def test_zero_policy_keeps_base_order():
    rng = np.random.default_rng(0)
    base = rng.random(30)
    p = rng.uniform(0.01, 0.99, 30)
    ranked = rank_scores(np.arange(30), base, p, policy(0.0, 0.0))
    assert [c.item_id for c in ranked] == list(np.argsort(-base))


def test_neutral_zone_keeps_base_order():
    rng = np.random.default_rng(1)
    base = rng.random(30)
    p = rng.uniform(0.38, 0.76, 30)
    ranked = rank_scores(np.arange(30), base, p, policy())
    assert [c.item_id for c in ranked] == list(np.argsort(-base))
    assert all(c.boost == 0 and c.demote == 0 for c in ranked)


def test_boosted_beats_demoted_at_equal_base():
    ranked = rank_scores(np.array([1, 2]), [0.5, 0.5], [0.2, 0.9], policy())
    assert ranked[0].item_id == 2 and ranked[0].boost > 0 and ranked[1].demote < 0


def test_ties_break_on_base_then_item_id():
    ranked = rank_scores(np.array([9, 3, 5]), [0.4, 0.4, 0.6], [0.5, 0.5, 0.5], policy(0.0, 0.0))
    assert [c.item_id for c in ranked] == [5, 3, 9]


def test_rank_scores_validation():
    with pytest.raises(ValueError):
        rank_scores(np.array([]), [], [], policy())
    with pytest.raises(ValueError):
        rank_scores(np.array([1]), [0.1], [1.0], policy())


def test_rank_slate_uses_proxy():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 2))
    y = (X[:, 0] + 0.3 * rng.normal(size=500) > 0).astype(int)
    proxy = train_proxy(X, y)
    ctx = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 0.0]])
    ranked = rank_slate([(10, 0.5), (11, 0.5), (12, 0.5)], proxy, ctx, policy())
    assert [c.item_id for c in ranked] == [10, 12, 11]
    assert ranked[0].to_dict()["item_id"] == 10


# -- algebraic properties ---------------------------------------------------------------

slates = st.integers(1, 25).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(0.001, 0.999), min_size=n, max_size=n),
))
taus = st.tuples(st.floats(0.01, 0.98), st.floats(0.001, 0.5)).map(
    lambda t: ThresholdPair(min(t[0] + t[1], 0.999), t[0], 0.8, 0.6, 10))
policies = st.builds(RankingPolicy, st.floats(0, 2), st.floats(0, 0.99), taus)


@settings(max_examples=500, deadline=None)
@given(slates, policies)
def test_decomposition_and_exclusivity(slate, pol):
    base, p = map(np.array, slate)
    b, d, final = rescore(base, p, pol)
    assert np.array_equal(final, base + b + d)
    assert not ((b != 0) & (d != 0)).any()
    assert (b >= 0).all() and (d <= 0).all()
    ranked = rank_scores(np.arange(base.size), base, p, pol)
    assert sorted(c.item_id for c in ranked) == list(range(base.size))
    for c in ranked:
        assert c.score_final == c.score_base + c.boost + c.demote


@settings(max_examples=500, deadline=None)
@given(slates, policies, st.data())
def test_raising_p_hat_never_lowers_rank(slate, pol, data):
    base, p = map(np.array, slate)
    i = data.draw(st.integers(0, base.size - 1))
    bump = data.draw(st.floats(0, 0.999))
    q = p.copy()
    q[i] = max(q[i], min(0.999, q[i] + bump))
    ids = np.arange(base.size)
    before = [c.item_id for c in rank_scores(ids, base, p, pol)].index(i)
    after = [c.item_id for c in rank_scores(ids, base, q, pol)].index(i)
    assert after <= before


@settings(max_examples=300, deadline=None)
@given(slates, taus)
def test_neutral_zone_noop(slate, tp):
    base, p = map(np.array, slate)
    p = np.clip(p, tp.tau_demote, tp.tau_boost)
    pol = RankingPolicy(1.0, 0.5, tp)
    _, _, final = rescore(base, p, pol)
    ids = np.arange(base.size)
    assert np.array_equal(slate_order(ids, base, final), slate_order(ids, base, base))


# -- A/B harness -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_experiment():
    world = generate_world(WorldConfig(n_users=3000, n_items=300, history_days=10, seed=5))
    X, y, _ = proxy_dataset(world)
    proxy = train_proxy(X, y)
    scores = proxy.predict_proba(X)[:, 1]
    taus = calibrate_thresholds(scores, y, 0.95, 0.80)
    ctx = ExperimentContext.build(world, proxy)
    return world, ctx, RankingPolicy(0.1, 0.5, taus)


def test_ab_report_shape_and_determinism(small_experiment):
    world, ctx, treat = small_experiment
    log = []
    a = ab_simulate(world, treat.disabled(), treat, days=3, seed=1, context=ctx, bootstrap_iterations=200,
                    n_users=1000, slate_log=log)
    b = ab_simulate(world, treat.disabled(), treat, days=3, seed=1, context=ctx, bootstrap_iterations=200,
                    n_users=1000)
    assert a.to_dict() == b.to_dict()
    assert set(a.metrics) == set(AB_METRICS)
    assert sum(a.arm_sizes.values()) == 1000
    for m in a.metrics.values():
        assert m.ci_low <= m.ci_high
        assert m.delta == pytest.approx(m.treatment_mean - m.control_mean)
    assert all(len(v) == 3 for v in a.daily["control"].values())
    row = log[0]
    assert set(row) == {"user_id", "day", "position", "item_id", "score_base", "p_hat", "boost", "demote",
                        "score_final"}
    assert all(r["score_final"] == r["score_base"] + r["boost"] + r["demote"] for r in log)


def test_arm_assignment_is_stable_hash():
    ids = np.arange(10_000)
    a = assign_arms(ids, 3)
    assert np.array_equal(a, assign_arms(ids, 3))
    assert np.array_equal(a[5000:], assign_arms(ids[5000:], 3))
    assert abs(a.mean() - 0.5) < 0.02


def test_ab_degenerate_arms(small_experiment):
    world, ctx, treat = small_experiment
    with pytest.raises(ValueError, match="degenerate"):
        ab_simulate(world, treat, treat, days=1, seed=0, context=ctx, n_users=2)
    with pytest.raises(ValueError):
        ab_simulate(world, treat, treat, days=0, seed=0, context=ctx)
