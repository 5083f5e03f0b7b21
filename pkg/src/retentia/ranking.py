"""Final-stage boost/demote rescoring and an A/B experiment simulator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._rng import keyed_uniform
from .core import FeatureBuilder
from .proxy import ThresholdPair
from .stats import TestResult, bootstrap_diff_ci, cohens_d_independent, two_sample_t_test

DEFAULT_BETA = 0.5
AB_METRICS = ("sessions_per_user", "like_rate", "skip_rate", "negative_feedback_rate", "low_quality_exposure_rate")
AB_CATEGORIES = {
    "sessions_per_user": "Engagement",
    "like_rate": "Engagement",
    "skip_rate": "Satisfaction",
    "negative_feedback_rate": "Integrity",
    "low_quality_exposure_rate": "Quality",
}


@dataclass(frozen=True)
class RankingPolicy:
    """Boost size ``alpha``, demotion slope ``beta`` and the two thresholds.

    ``alpha = beta = 0`` is accepted and gives the unmodified base ranking,
    which is what a control arm runs.
    """

    alpha: float
    beta: float
    thresholds: ThresholdPair

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be a non-negative finite number")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")

    @property
    def tau_boost(self) -> float:
        return self.thresholds.tau_boost

    @property
    def tau_demote(self) -> float:
        return self.thresholds.tau_demote

    @classmethod
    def from_base_scores(cls, score_base, thresholds: ThresholdPair, beta: float = DEFAULT_BETA,
                         alpha_iqr_factor: float = 0.5) -> "RankingPolicy":
        """Default boost size: ``alpha_iqr_factor`` times the interquartile range of base scores."""
        q1, q3 = np.percentile(np.asarray(score_base, dtype=float), [25, 75])
        alpha = alpha_iqr_factor * (q3 - q1)
        if alpha <= 0:
            raise ValueError("base scores have zero interquartile range")
        return cls(float(alpha), beta, thresholds)

    def disabled(self) -> "RankingPolicy":
        return RankingPolicy(0.0, 0.0, self.thresholds)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "thresholds": self.thresholds.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RankingPolicy":
        return cls(float(d["alpha"]), float(d["beta"]), ThresholdPair.from_dict(d["thresholds"]))


def boost(p_hat, policy: RankingPolicy):
    """``alpha`` when ``p_hat > tau_boost`` (strict), else 0."""
    p = np.asarray(p_hat, dtype=float)
    out = np.where(p > policy.tau_boost, policy.alpha, 0.0)
    return float(out) if out.ndim == 0 else out


def demote(p_hat, policy: RankingPolicy):
    """``-beta * (tau_demote - p_hat)`` when ``p_hat < tau_demote`` (strict), else 0."""
    p = np.asarray(p_hat, dtype=float)
    out = np.where(p < policy.tau_demote, -policy.beta * (policy.tau_demote - p), 0.0)
    out = out + 0.0  # normalizes -0.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScoredCandidate:
    item_id: object
    score_base: float
    p_hat: float
    boost: float
    demote: float
    score_final: float

    def to_dict(self) -> dict:
        item = self.item_id.item() if isinstance(self.item_id, np.generic) else self.item_id
        return {"item_id": item, "score_base": self.score_base, "p_hat": self.p_hat,
                "boost": self.boost, "demote": self.demote, "score_final": self.score_final}


def rescore(score_base, p_hat, policy: RankingPolicy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``(boost, demote, score_final)``."""
    base = np.asarray(score_base, dtype=float)
    b = np.asarray(boost(np.asarray(p_hat, float).reshape(-1), policy)).reshape(base.shape)
    d = np.asarray(demote(np.asarray(p_hat, float).reshape(-1), policy)).reshape(base.shape)
    return b, d, base + b + d


def slate_order(item_ids, score_base, score_final) -> np.ndarray:
    """Descending final score, then descending base score, then ascending item id."""
    return np.lexsort((np.asarray(item_ids), -np.asarray(score_base, float), -np.asarray(score_final, float)))


def rank_scores(item_ids, score_base, p_hat, policy: RankingPolicy) -> list[ScoredCandidate]:
    item_ids = np.asarray(item_ids)
    base = np.asarray(score_base, dtype=float)
    p = np.asarray(p_hat, dtype=float)
    if item_ids.size == 0:
        raise ValueError("candidates must be non-empty")
    if ((p <= 0) | (p >= 1)).any():
        raise ValueError("p_hat must lie strictly inside (0, 1)")
    b, d, final = rescore(base, p, policy)
    order = slate_order(item_ids, base, final)
    return [ScoredCandidate(item_ids[i], float(base[i]), float(p[i]), float(b[i]), float(d[i]), float(final[i]))
            for i in order]


def rank_slate(candidates: Sequence[tuple], proxy, context_features, policy: RankingPolicy) -> list[ScoredCandidate]:
    """Score candidates with the proxy and return them in final ranking order.

    ``context_features`` holds one proxy-feature row per candidate, aligned with
    ``candidates`` (a FeatureMatrix or an array in the proxy's schema order).
    """
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    item_ids = [c[0] for c in candidates]
    base = [c[1] for c in candidates]
    p_hat = proxy.predict_proba(context_features)[:, 1]
    if p_hat.size != len(candidates):
        raise ValueError("context_features must hold one row per candidate")
    return rank_scores(np.asarray(item_ids), base, p_hat, policy)


# --------------------------------------------------------------------------
# A/B simulation


@dataclass(frozen=True)
class MetricComparison:
    metric: str
    category: str
    control_mean: float
    treatment_mean: float
    delta: float
    relative_delta: float
    test: TestResult
    cohens_d: float
    ci_low: float
    ci_high: float
    n_control: int
    n_treatment: int

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "category": self.category,
            "control_mean": self.control_mean, "treatment_mean": self.treatment_mean,
            "delta": self.delta, "relative_delta": self.relative_delta,
            "test": self.test.to_dict(), "cohens_d": self.cohens_d,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "n_control": self.n_control, "n_treatment": self.n_treatment,
        }


@dataclass(frozen=True)
class AbReport:
    days: int
    arm_sizes: dict
    metrics: dict  # metric -> MetricComparison
    daily: dict  # arm -> metric -> list of per-day values

    def __getitem__(self, metric: str) -> MetricComparison:
        return self.metrics[metric]

    def to_dict(self) -> dict:
        return {
            "days": self.days,
            "arm_sizes": dict(self.arm_sizes),
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "daily": self.daily,
        }


@dataclass
class ExperimentContext:
    """Frozen pre-experiment state shared by every simulated day."""

    world: object
    builder: FeatureBuilder
    start_day: int
    proxy: object
    behavior: object = None

    @classmethod
    def build(cls, world, proxy, behavior=None, horizon: Optional[int] = None) -> "ExperimentContext":
        from .synthworld import default_horizon

        horizon = default_horizon(world.config) if horizon is None else horizon
        sim = world.simulate(horizon)
        builder = FeatureBuilder(sim.interactions, world.items(), world.users())
        return cls(world, builder, horizon, proxy, behavior)

    def p_hat(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        fm = self.builder.proxy_matrix(users, items, self.start_day, behavior=self.behavior)
        return self.proxy.predict_proba(fm)[:, 1]


def assign_arms(user_ids, seed: int) -> np.ndarray:
    """Stable hash assignment: True means treatment."""
    return keyed_uniform(seed, "arm", np.asarray(user_ids)) < 0.5


def ab_simulate(world, control_policy: RankingPolicy, treatment_policy: RankingPolicy, days: int, seed: int,
                proxy=None, behavior=None, n_users: Optional[int] = None, slate_size: int = 20,
                consume: int = 5, bootstrap_iterations: int = 1000,
                context: Optional[ExperimentContext] = None, slate_log: Optional[list] = None) -> AbReport:
    """Serve ranked slates to both arms for ``days`` days and compare per-user metrics.

    Each active user-day draws ``slate_size`` candidates, ranks them with the
    arm's policy and consumes the top ``consume``. Tomorrow's activity follows
    the world's return model given today's consumed quality. Proxy features are
    frozen at the experiment start.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if context is None:
        if proxy is None:
            raise ValueError("a proxy model or an ExperimentContext is required")
        context = ExperimentContext.build(world, proxy, behavior)
    n = world.config.n_users if n_users is None else min(int(n_users), world.config.n_users)
    users_all = world.user_ids[:n]
    treat = assign_arms(users_all, seed)
    sizes = {"control": int((~treat).sum()), "treatment": int(treat.sum())}
    if min(sizes.values()) < 2:
        raise ValueError(f"degenerate arm sizes {sizes}; each arm needs at least 2 users")

    sessions = np.zeros(n)
    views = np.zeros(n)
    likes = np.zeros(n)
    skips = np.zeros(n)
    negs = np.zeros(n)
    lowq = np.zeros(n)
    daily = {arm: {m: [] for m in AB_METRICS} for arm in ("control", "treatment")}
    intent_prev = world.intent(users_all, -1, stream="ab_intent", seed=seed)
    exposure = np.zeros(n)
    slots = np.arange(slate_size)
    for d in range(days):
        p_act = world.return_prob(users_all, intent_prev, exposure)
        active = keyed_uniform(seed, "ab_active", users_all, d) < p_act
        u = users_all[active]
        uu = np.repeat(u, slate_size)
        ss = np.tile(slots, u.size)
        items = world.choose_items(uu, d, ss, seed, stream="ab_cand")
        base = world.base_scores(uu, items, d, ss, seed)
        p_hat = context.p_hat(uu, items)
        bb, dd, final = (np.empty_like(base) for _ in range(3))
        arm_t = treat[uu]
        for policy, sel in ((control_policy, ~arm_t), (treatment_policy, arm_t)):
            bb[sel], dd[sel], final[sel] = rescore(base[sel], p_hat[sel], policy)
        # rank within each user's slate: user, then the slate ordering keys
        order = np.lexsort((items, -base, -final, uu))
        pos = np.empty_like(order)
        pos[order] = np.tile(slots, u.size)
        taken = pos < consume
        cu, ci = uu[taken], items[taken]
        if slate_log is not None:
            for k in order:
                slate_log.append({"user_id": int(uu[k]), "day": d, "position": int(pos[k]), "item_id": int(items[k]),
                                  "score_base": float(base[k]), "p_hat": float(p_hat[k]), "boost": float(bb[k]),
                                  "demote": float(dd[k]), "score_final": float(final[k])})
        eng = world.engagement(cu, ci, d, ci, seed, stream="ab_engage")
        nv = np.bincount(cu, minlength=n)[:n].astype(float)
        sessions += active
        views += nv
        likes += np.bincount(cu, weights=eng.like, minlength=n)[:n]
        skips += np.bincount(cu, weights=eng.skip, minlength=n)[:n]
        negs += np.bincount(cu, weights=eng.negative_feedback, minlength=n)[:n]
        lowq += np.bincount(cu, weights=world.low_quality[ci], minlength=n)[:n]
        qsum = np.bincount(cu, weights=world.quality[ci], minlength=n)[:n]
        exposure = np.divide(qsum, nv, out=np.zeros(n), where=nv > 0)
        intent_prev = world.intent(users_all, d, stream="ab_intent", seed=seed)
        for arm, mask in (("control", ~treat), ("treatment", treat)):
            am = mask & active
            v = nv[am].sum()
            ratio = lambda x: float(x[am].sum() / v) if v > 0 else float("nan")
            daily[arm]["sessions_per_user"].append(float(active[mask].mean()))
            daily[arm]["like_rate"].append(ratio(np.bincount(cu, weights=eng.like, minlength=n)[:n]))
            daily[arm]["skip_rate"].append(ratio(np.bincount(cu, weights=eng.skip, minlength=n)[:n]))
            daily[arm]["negative_feedback_rate"].append(
                ratio(np.bincount(cu, weights=eng.negative_feedback, minlength=n)[:n]))
            daily[arm]["low_quality_exposure_rate"].append(
                ratio(np.bincount(cu, weights=world.low_quality[ci], minlength=n)[:n]))

    seen = views > 0
    per_user = {
        "sessions_per_user": (sessions, np.ones(n, dtype=bool)),
        "like_rate": (np.divide(likes, views, out=np.zeros(n), where=seen), seen),
        "skip_rate": (np.divide(skips, views, out=np.zeros(n), where=seen), seen),
        "negative_feedback_rate": (np.divide(negs, views, out=np.zeros(n), where=seen), seen),
        "low_quality_exposure_rate": (np.divide(lowq, views, out=np.zeros(n), where=seen), seen),
    }
    metrics = {}
    for name, (values, ok) in per_user.items():
        c = values[ok & ~treat]
        t = values[ok & treat]
        if c.size < 2 or t.size < 2:
            raise ValueError(f"degenerate arm sizes for {name}")
        test = two_sample_t_test(t, c)
        lo, hi = bootstrap_diff_ci(t, c, iterations=bootstrap_iterations, seed=seed)
        cm, tm = float(c.mean()), float(t.mean())
        metrics[name] = MetricComparison(
            name, AB_CATEGORIES[name], cm, tm, tm - cm, (tm - cm) / cm if cm != 0 else float("nan"),
            test, cohens_d_independent(t, c), lo, hi, int(c.size), int(t.size),
        )
    return AbReport(days, sizes, metrics, daily)
