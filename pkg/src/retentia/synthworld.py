"""Deterministic synthetic world with planted retention intent, item quality,
survey constructs and survey nonresponse.

Generative outline
------------------
Users fall into an active and a less-active tier and carry a habit score
``h``, a favourite topic and demographics. Each day ``d`` a user has a latent
return-intent state ``eps[u, d] ~ N(0, 1)``. Activity on day ``d + 1`` is
Bernoulli with probability::

    floor + (1 - floor) * (1 - exp(-iota * exp(gamma * x_d)))
    log iota = alpha[tier] + beta_h * h + intent_effect * m[tier] * eps[u, d]

where ``x_d`` is the mean quality of the items viewed on day ``d`` (zero when
inactive). Everyone has a session on the survey day ``T = horizon - 2``; the
survey targets the first item viewed that day, and day ``T + 1`` views define
the retention label.

Survey latents share the standardized quality ``z`` of the surveyed item::

    RR  = a z + sqrt(1 - a^2) (sqrt(k) eps[u, T] + sqrt(1 - k) nu)
    WYT = d z + e_W,   IM = f z + e_I

so RR carries the return intent while WYT and IM relate to retention only
through item quality, which is an observed item feature. Latent correlations
are solved so the 5-level Likert ratings hit the configured targets.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit, ndtri
from scipy.stats import multivariate_normal

from ._rng import keyed_normal, keyed_poisson, keyed_uniform
from .core import (Construct, InteractionTable, ItemTable, RetentionLabel, SurveyResponse, UserTable,
                   nearest_rank_percentile, write_jsonl)

TIERS = ("less_active", "active")
NONRESPONSE_COVARIATES = ("age_cohort", "region", "tenure_days")


class InfeasibleCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of the synthetic world. Tier-indexed pairs are ``(less_active, active)``."""

    n_users: int = 50_000
    n_items: int = 2_000
    n_topics: int = 8
    history_days: int = 28
    seed: int = 0
    active_fraction: float = 0.5
    # usage
    views_rate: tuple[float, float] = (1.5, 5.0)
    topic_focus: float = 0.5
    popularity_sigma: float = 0.5
    low_quality_fraction: float = 0.15
    # return model
    return_floor: float = 0.02
    tier_log_intensity: tuple[float, float] = (-0.9, 0.8)
    habit_effect: float = 0.5
    intent_effect: float = 0.8
    intent_multiplier: tuple[float, float] = (1.4, 0.6)
    exposure_effect: float = 0.3
    # survey constructs (targets are Likert-scale Pearson correlations)
    rho_rr_wyt: float = 0.63
    rho_rr_im: float = 0.58
    rho_wyt_im: float = 0.60
    quality_loading: float = 0.75
    intent_share: float = 0.85
    likert_probs: tuple[float, ...] = (0.08, 0.12, 0.25, 0.30, 0.25)
    # nonresponse
    response_rate: float = 0.9
    nonresponse_coefs: Mapping[str, float] = field(default_factory=lambda: {c: 0.0 for c in NONRESPONSE_COVARIATES})

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_topics"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_items < self.n_topics:
            raise ValueError("n_items must be at least n_topics")
        if self.history_days < 0:
            raise ValueError("history_days must be >= 0")
        for name in ("active_fraction", "topic_focus", "low_quality_fraction", "return_floor",
                     "response_rate", "intent_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("rho_rr_wyt", "rho_rr_im", "rho_wyt_im"):
            if not -1.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (-1, 1)")
        if not 0.0 < self.quality_loading < 1.0:
            raise ValueError("quality_loading must lie in (0, 1)")
        probs = np.asarray(self.likert_probs, dtype=float)
        if probs.size != 5 or (probs <= 0).any() or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("likert_probs must be five positive probabilities summing to 1")
        unknown = set(self.nonresponse_coefs) - set(NONRESPONSE_COVARIATES)
        if unknown:
            raise ValueError(f"unknown nonresponse covariates {sorted(unknown)}")
        for name in ("views_rate", "tier_log_intensity", "intent_multiplier"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
            if len(getattr(self, name)) != 2:
                raise ValueError(f"{name} needs one value per tier")
        object.__setattr__(self, "likert_probs", tuple(float(p) for p in self.likert_probs))
        object.__setattr__(self, "nonresponse_coefs",
                           {c: float(self.nonresponse_coefs.get(c, 0.0)) for c in NONRESPONSE_COVARIATES})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig keys {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path) -> "WorldConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "WorldConfig":
        return WorldConfig.from_dict({**self.to_dict(), **changes})


# --------------------------------------------------------------------------
# Likert copula


def likert_cuts(probs) -> np.ndarray:
    return ndtri(np.cumsum(probs)[:-1])


def discretize_likert(latent, probs) -> np.ndarray:
    return 1 + np.searchsorted(likert_cuts(probs), latent, side="left").astype(np.int64)


@lru_cache(maxsize=64)
def _likert_corr(rho: float, probs: tuple) -> float:
    cuts = np.concatenate([[-9.0], likert_cuts(probs), [9.0]])
    a, b = np.meshgrid(cuts, cuts, indexing="ij")
    pts = np.column_stack([a.ravel(), b.ravel()])
    F = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf(pts).reshape(6, 6)
    F[0, :] = 0.0
    F[:, 0] = 0.0
    cell = np.diff(np.diff(F, axis=0), axis=1)
    cell /= cell.sum()
    levels = np.arange(1, 6, dtype=float)
    p = np.asarray(probs)
    mu = levels @ p
    var = (levels ** 2) @ p - mu ** 2
    exy = levels @ cell @ levels
    return float((exy - mu ** 2) / var)


def latent_correlation(target: float, probs) -> float:
    """Latent normal correlation whose discretized ratings correlate at ``target``."""
    probs = tuple(float(p) for p in probs)
    if target == 0:
        return 0.0
    lo, hi = (-0.9999, 0.0) if target < 0 else (0.0, 0.9999)
    f = lambda r: _likert_corr(r, probs) - target
    if f(lo) * f(hi) > 0:
        raise InfeasibleCorrelationError(f"Likert correlation {target} is not attainable")
    return float(brentq(f, lo, hi, xtol=1e-10))


@dataclass(frozen=True)
class SurveyLoadings:
    a: float  # RR on quality
    d: float  # WYT on quality
    f: float  # IM on quality
    resid_corr: float  # corr(e_W, e_I)
    latent: tuple[float, float, float]  # (RR-WYT, RR-IM, WYT-IM)


def survey_loadings(config: WorldConfig) -> SurveyLoadings:
    probs = config.likert_probs
    r_rw = latent_correlation(config.rho_rr_wyt, probs)
    r_ri = latent_correlation(config.rho_rr_im, probs)
    r_wi = latent_correlation(config.rho_wyt_im, probs)
    corr = np.array([[1, r_rw, r_ri], [r_rw, 1, r_wi], [r_ri, r_wi, 1]])
    if np.linalg.eigvalsh(corr).min() <= 0:
        raise InfeasibleCorrelationError("correlation target triple is not positive definite")
    a = config.quality_loading
    d, f = r_rw / a, r_ri / a
    if abs(d) >= 1 or abs(f) >= 1:
        raise InfeasibleCorrelationError(
            f"quality_loading {a} too small for latent correlations {r_rw:.3f}, {r_ri:.3f}")
    rest = math.sqrt((1 - d * d) * (1 - f * f))
    rc = (r_wi - d * f) / rest
    if abs(rc) >= 1:
        raise InfeasibleCorrelationError(
            f"WYT-IM target {config.rho_wyt_im} infeasible with quality_loading {a}")
    return SurveyLoadings(a, d, f, rc, (r_rw, r_ri, r_wi))


# --------------------------------------------------------------------------
# world


@dataclass(frozen=True)
class Engagement:
    like: np.ndarray
    comment: np.ndarray
    share: np.ndarray
    skip: np.ndarray
    negative_feedback: np.ndarray
    watch_time_seconds: np.ndarray


@dataclass(frozen=True)
class Simulation:
    """Observed data for one horizon plus the latent quantities behind it."""

    horizon: int
    survey_day: int
    interactions: InteractionTable
    negative_feedback: np.ndarray
    survey_item: np.ndarray  # item index per user
    ratings: dict  # Construct -> int array over users (all users, before nonresponse)
    responded: np.ndarray
    next_day_views: np.ndarray
    retained: np.ndarray
    survey_exposure: np.ndarray  # mean quality viewed on the survey day
    latents: dict

    @property
    def label_day(self) -> int:
        return self.survey_day + 1


class SynthWorld:
    """Users, items and generative functions; build with :func:`generate_world`."""

    def __init__(self, config: WorldConfig):
        self.config = config
        cfg = config
        s = cfg.seed
        nu, ni = cfg.n_users, cfg.n_items
        u = np.arange(nu)
        v = np.arange(ni)
        self.user_ids = u
        self.item_ids = v
        self.tier = (keyed_uniform(s, "tier", u) < cfg.active_fraction).astype(np.int64)
        self.habit = keyed_normal(s, "habit", u)
        self.fav_topic = (keyed_uniform(s, "fav", u) * cfg.n_topics).astype(np.int64)
        self.age_cohort = (keyed_uniform(s, "age", u) * 5).astype(np.int64)
        self.region = (keyed_uniform(s, "region", u) * 6).astype(np.int64)
        tenure_z = 0.4 * self.habit + math.sqrt(1 - 0.16) * keyed_normal(s, "tenure", u)
        self.tenure_days = np.round(30 + 300 * np.exp(0.6 * tenure_z))
        self.nu = keyed_normal(s, "survey_noise", u)
        self.survey_noise = np.column_stack([keyed_normal(s, "wyt_noise", u), keyed_normal(s, "im_noise", u)])

        self.topic = v % cfg.n_topics
        raw = keyed_normal(s, "quality", v)
        self.quality = np.round((raw - raw.mean()) / raw.std(), 2)
        pop = np.exp(cfg.popularity_sigma * keyed_normal(s, "popularity", v))
        self.popularity = np.round(pop / pop.mean(), 4)
        n_low = int(round(cfg.low_quality_fraction * ni))
        rank = np.argsort(np.argsort(self.quality, kind="stable"), kind="stable")
        self.low_quality = rank < n_low
        self._pop_cdf = np.cumsum(self.popularity) / self.popularity.sum()
        self._topic_items = np.argsort(self.topic, kind="stable")
        counts = np.bincount(self.topic, minlength=cfg.n_topics)
        self._topic_start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self._topic_count = counts

        self.loadings = survey_loadings(cfg)
        self.responded = self._nonresponse()
        self._sims: dict[int, Simulation] = {}

    # -- static attributes ------------------------------------------------

    def users(self) -> UserTable:
        return UserTable(self.user_ids, self.age_cohort, self.region, self.tenure_days)

    def items(self) -> ItemTable:
        return ItemTable(self.item_ids, self.topic, self.quality, self.popularity)

    def nonresponse_covariates(self) -> tuple[np.ndarray, tuple[str, ...]]:
        return (np.column_stack([self.age_cohort, self.region, self.tenure_days]).astype(float),
                NONRESPONSE_COVARIATES)

    def response_propensity(self) -> np.ndarray:
        cfg = self.config
        if cfg.response_rate >= 1.0:
            return np.ones(cfg.n_users)
        if cfg.response_rate <= 0.0:
            return np.zeros(cfg.n_users)
        X, names = self.nonresponse_covariates()
        Xz = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        coefs = np.array([cfg.nonresponse_coefs[c] for c in names])
        return expit(logit(cfg.response_rate) + Xz @ coefs)

    def _nonresponse(self) -> np.ndarray:
        return keyed_uniform(self.config.seed, "respond", self.user_ids) < self.response_propensity()

    # -- generative pieces ------------------------------------------------

    def intent(self, users, day, stream: str = "intent", seed: Optional[int] = None) -> np.ndarray:
        return keyed_normal(self.config.seed if seed is None else seed, stream, users, day)

    def log_intensity(self, users, intent) -> np.ndarray:
        cfg = self.config
        tier = self.tier[users]
        alpha = np.asarray(cfg.tier_log_intensity)[tier]
        mult = np.asarray(cfg.intent_multiplier)[tier]
        return alpha + cfg.habit_effect * self.habit[users] + cfg.intent_effect * mult * intent

    def return_prob(self, users, intent, exposure) -> np.ndarray:
        """Probability of a session the next day given today's intent and exposure."""
        cfg = self.config
        iota = np.exp(self.log_intensity(users, intent) + cfg.exposure_effect * np.asarray(exposure, float))
        return cfg.return_floor + (1 - cfg.return_floor) * -np.expm1(-iota)

    def n_views(self, users, day, seed: int, stream: str = "views") -> np.ndarray:
        cfg = self.config
        lam = np.asarray(cfg.views_rate)[self.tier[users]] * np.exp(0.3 * self.habit[users])
        return 1 + keyed_poisson(seed, stream, lam, users, day)

    def choose_items(self, users, day, slot, seed: int, stream: str = "choice") -> np.ndarray:
        focus = keyed_uniform(seed, stream + "/focus", users, day, slot) < self.config.topic_focus
        pick = keyed_uniform(seed, stream + "/pick", users, day, slot)
        fav = self.fav_topic[users]
        in_topic = self._topic_items[self._topic_start[fav] + np.minimum(
            (pick * self._topic_count[fav]).astype(np.int64), self._topic_count[fav] - 1)]
        by_pop = np.minimum(np.searchsorted(self._pop_cdf, pick, side="right"), self.config.n_items - 1)
        return np.where(focus, in_topic, by_pop)

    def engagement(self, users, items, day, slot, seed: int, stream: str = "engage") -> Engagement:
        aff = (self.topic[items] == self.fav_topic[users]).astype(float)
        q = self.quality[items]
        low = self.low_quality[items].astype(float)
        h = self.habit[users]
        U = lambda tag: keyed_uniform(seed, f"{stream}/{tag}", users, day, slot)
        skip = U("skip") < expit(-1.0 - 0.6 * q - 0.6 * aff + 0.8 * low)
        like = (U("like") < expit(-1.5 + 0.8 * aff + 0.6 * q + 0.2 * h)) & ~skip
        comment = (U("comment") < expit(-4.0 + 0.6 * aff + 0.3 * q)) & ~skip
        share = (U("share") < expit(-4.5 + 0.6 * aff + 0.4 * q)) & ~skip
        neg = U("neg") < expit(-5.0 + 2.0 * low - 0.3 * q)
        w = U("watch")
        watch = np.where(skip, 1 + np.floor(4 * w), np.round(8 + 30 * expit(0.8 * q + aff) * (0.5 + w)))
        return Engagement(like.astype(np.int64), comment.astype(np.int64), share.astype(np.int64),
                          skip.astype(np.int64), neg.astype(np.int64), watch)

    def base_scores(self, users, items, day, slot, seed: int) -> np.ndarray:
        """Baseline engagement-model score in [0, 1] for candidate ranking."""
        aff = (self.topic[items] == self.fav_topic[users]).astype(float)
        noise = keyed_normal(seed, "base_noise", users, day, slot)
        return expit(-0.5 + 1.0 * aff + 0.5 * np.log(self.popularity[items]) + 0.2 * self.quality[items]
                     + 0.5 * noise)

    # -- day-by-day simulation -------------------------------------------

    def simulate(self, horizon: int) -> Simulation:
        if horizon < 2:
            raise ValueError("horizon must be >= 2 (retention needs a next day)")
        if horizon not in self._sims:
            self._sims[horizon] = self._simulate(horizon)
        return self._sims[horizon]

    def _simulate(self, horizon: int) -> Simulation:
        cfg = self.config
        s = cfg.seed
        u_all = self.user_ids
        T = horizon - 2
        cols = {k: [] for k in ("user_id", "item_id", "day", "like", "comment", "share", "skip", "watch")}
        negs = []
        exposure = np.zeros(cfg.n_users)
        intent_prev = self.intent(u_all, -1)
        survey_item = np.full(cfg.n_users, -1, dtype=np.int64)
        survey_exposure = np.zeros(cfg.n_users)
        next_day_views = np.zeros(cfg.n_users, dtype=np.int64)
        for day in range(horizon):
            p_act = self.return_prob(u_all, intent_prev, exposure)
            active = keyed_uniform(s, "active", u_all, day) < p_act
            if day == T:
                active[:] = True
            users = u_all[active]
            nv = self.n_views(users, day, s)
            row_user = np.repeat(users, nv)
            starts = np.concatenate([[0], np.cumsum(nv)[:-1]])
            slot = np.arange(row_user.size) - np.repeat(starts, nv)
            items = self.choose_items(row_user, day, slot, s)
            eng = self.engagement(row_user, items, day, slot, s)
            cols["user_id"].append(row_user)
            cols["item_id"].append(items)
            cols["day"].append(np.full(row_user.size, day, dtype=np.int64))
            cols["like"].append(eng.like)
            cols["comment"].append(eng.comment)
            cols["share"].append(eng.share)
            cols["skip"].append(eng.skip)
            cols["watch"].append(eng.watch_time_seconds)
            negs.append(eng.negative_feedback)
            qsum = np.bincount(row_user, weights=self.quality[items], minlength=cfg.n_users)
            exposure = np.zeros(cfg.n_users)
            exposure[users] = qsum[users] / nv
            if day == T:
                survey_item = items[starts]
                survey_item_full = np.full(cfg.n_users, -1, dtype=np.int64)
                survey_item_full[users] = survey_item
                survey_item = survey_item_full
                survey_exposure = exposure.copy()
            if day == T + 1:
                next_day_views = np.bincount(row_user, minlength=cfg.n_users)
            intent_prev = self.intent(u_all, day)
        table = InteractionTable(
            user_id=np.concatenate(cols["user_id"]), item_id=np.concatenate(cols["item_id"]),
            day=np.concatenate(cols["day"]), like=np.concatenate(cols["like"]),
            comment=np.concatenate(cols["comment"]), share=np.concatenate(cols["share"]),
            skip=np.concatenate(cols["skip"]), watch_time_seconds=np.concatenate(cols["watch"]),
        )
        ratings, latents = self._survey(survey_item, T)
        threshold = nearest_rank_percentile(next_day_views, 5.0)
        latents["retention_threshold"] = threshold
        return Simulation(
            horizon=horizon, survey_day=T, interactions=table, negative_feedback=np.concatenate(negs),
            survey_item=survey_item, ratings=ratings, responded=self.responded,
            next_day_views=next_day_views, retained=next_day_views > threshold,
            survey_exposure=survey_exposure, latents=latents,
        )

    def _survey(self, survey_item: np.ndarray, T: int) -> tuple[dict, dict]:
        cfg = self.config
        L = self.loadings
        q = self.quality[survey_item]
        z = (q - q.mean()) / q.std() if q.std() > 0 else np.zeros_like(q)
        eps = self.intent(self.user_ids, T)
        k = cfg.intent_share
        rr = L.a * z + math.sqrt(1 - L.a ** 2) * (math.sqrt(k) * eps + math.sqrt(1 - k) * self.nu)
        n1, n2 = self.survey_noise[:, 0], self.survey_noise[:, 1]
        wyt = L.d * z + math.sqrt(1 - L.d ** 2) * n1
        im = L.f * z + math.sqrt(1 - L.f ** 2) * (L.resid_corr * n1 + math.sqrt(1 - L.resid_corr ** 2) * n2)
        probs = cfg.likert_probs
        ratings = {
            Construct.RETENTIVE_RELEVANCE: discretize_likert(rr, probs),
            Construct.WORTH_YOUR_TIME: discretize_likert(wyt, probs),
            Construct.INTEREST_MATCHING: discretize_likert(im, probs),
        }
        return ratings, {"intent": eps, "quality_z": z, "rr": rr, "wyt": wyt, "im": im}

    # -- oracle ----------------------------------------------------------

    def true_retention_prob(self, user_id, exposure: float, horizon: Optional[int] = None) -> float:
        """Exact next-day return probability after the survey day."""
        u = int(user_id)
        if not 0 <= u < self.config.n_users or u != user_id:
            raise KeyError(f"unknown user {user_id!r}")
        T = (self.config.history_days if horizon is None else horizon - 2)
        eps = self.intent(np.array([u]), T)
        return float(self.return_prob(np.array([u]), eps, np.array([exposure]))[0])


def generate_world(config: WorldConfig = WorldConfig()) -> SynthWorld:
    return SynthWorld(config)


def true_retention_prob(world: SynthWorld, user_id, exposure: float, horizon: Optional[int] = None) -> float:
    return world.true_retention_prob(user_id, exposure, horizon)


def default_horizon(config: WorldConfig) -> int:
    return config.history_days + 2


# --------------------------------------------------------------------------
# emission

_INTERACTION_FMT = ('{"comment":%d,"day":%d,"item_id":%d,"like":%d,"share":%d,"skip":%d,'
                    '"user_id":%d,"watch_time_seconds":%.1f}')


def survey_records(world: SynthWorld, sim: Simulation) -> list[dict]:
    rows = []
    respond = np.nonzero(sim.responded & (sim.survey_item >= 0))[0]
    for u in respond:
        for c in Construct:
            rows.append({"user_id": int(u), "item_id": int(sim.survey_item[u]), "construct": c.value,
                         "rating": int(sim.ratings[c][u]), "day": sim.survey_day})
    return rows


def survey_responses(world: SynthWorld, sim: Simulation) -> list[SurveyResponse]:
    return [SurveyResponse(r["user_id"], r["item_id"], r["construct"], r["rating"], r["day"])
            for r in survey_records(world, sim)]


def label_records(sim: Simulation) -> list[RetentionLabel]:
    return [RetentionLabel(int(u), sim.label_day, bool(r)) for u, r in enumerate(sim.retained)]


def emit_datasets(world: SynthWorld, horizon_days: Optional[int] = None, out_dir=".") -> dict:
    """Write interactions, surveys, labels, users and items as JSONL files.

    Returns a mapping from dataset name to file path.
    """
    horizon = default_horizon(world.config) if horizon_days is None else horizon_days
    sim = world.simulate(horizon)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = sim.interactions
    paths = {name: out / f"{name}.jsonl" for name in ("interactions", "surveys", "labels", "users", "items")}
    with open(paths["interactions"], "w", encoding="utf-8") as fh:
        rows = zip(t.comment.tolist(), t.day.tolist(), t.item_id.tolist(), t.like.tolist(), t.share.tolist(),
                   t.skip.tolist(), t.user_id.tolist(), t.watch_time_seconds.tolist())
        fh.writelines(_INTERACTION_FMT % r + "\n" for r in rows)
    write_jsonl(paths["surveys"], survey_records(world, sim))
    write_jsonl(paths["labels"], ({"user_id": l.user_id, "day": l.day, "retained": int(l.retained)}
                                  for l in label_records(sim)))
    write_jsonl(paths["users"], world.users().to_rows())
    write_jsonl(paths["items"], world.items().to_rows())
    return {k: str(v) for k, v in paths.items()}


# --------------------------------------------------------------------------
# standalone planted samples for estimator oracles


def planted_logistic_sample(n: int, weights, bias: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal features with Bernoulli labels from a known logistic model."""
    w = np.asarray(weights, dtype=float)
    rows = np.arange(n)[:, None]
    cols = np.arange(w.size)[None, :]
    X = keyed_normal(seed, "planted_x", rows, cols)
    y = (keyed_uniform(seed, "planted_y", np.arange(n)) < expit(X @ w + bias)).astype(np.int64)
    return X, y


def calibration_regime_sample(n: int, seed: int = 0, intercept: float = 0.29,
                              slope: float = 0.58) -> tuple[np.ndarray, np.ndarray]:
    """Scores uniform on (0, 1) with ``P(y = 1 | s) = intercept + slope * s``.

    The defaults put the 80% positive-precision boost point near 0.76 and the
    60% negative-precision demote point near 0.38.
    """
    idx = np.arange(n)
    s = keyed_uniform(seed, "calib_score", idx)
    y = (keyed_uniform(seed, "calib_label", idx) < intercept + slope * s).astype(np.int64)
    return s, y


def retention_dataset(world: SynthWorld, horizon: Optional[int] = None, responders_only: bool = True,
                      constructs=tuple(Construct)):
    """Retention dataset straight from the simulation, skipping file round-trips.

    Equivalent to emitting the files and building the dataset from them.
    """
    from .core import FeatureBuilder
    from .evaluation import RetentionDataset

    sim = world.simulate(default_horizon(world.config) if horizon is None else horizon)
    rows = np.nonzero(sim.responded & (sim.survey_item >= 0))[0] if responders_only else \
        np.nonzero(sim.survey_item >= 0)[0]
    builder = FeatureBuilder(sim.interactions, world.items(), world.users())
    ratings = {Construct.parse(c): sim.ratings[Construct.parse(c)][rows] for c in constructs}
    fm = builder.retention_matrix(world.user_ids[rows], sim.survey_item[rows], sim.survey_day, ratings)
    return RetentionDataset(fm, sim.retained[rows].astype(np.int64), world.user_ids[rows],
                            fm.values[:, fm.names.index("h_views")].copy())


def behavior_dataset(world: SynthWorld, horizon: Optional[int] = None, max_rows: int = 200_000):
    """Survey-day views with like/skip outcomes, featurized from the prior window."""
    from .core import BEHAVIOR_INPUTS, FeatureBuilder

    sim = world.simulate(default_horizon(world.config) if horizon is None else horizon)
    tab = sim.interactions
    rows = np.nonzero(tab.day == sim.survey_day)[0][:max_rows]
    builder = FeatureBuilder(tab, world.items(), world.users())
    fm = builder.proxy_matrix(tab.user_id[rows], tab.item_id[rows], sim.survey_day).columns(BEHAVIOR_INPUTS)
    return fm, tab.like[rows], tab.skip[rows]


def proxy_dataset(world: SynthWorld, horizon: Optional[int] = None, behavior=None):
    """Proxy features and binarized RetentiveRelevance labels for non-neutral responders.

    Returns ``(features, labels, user_ids)``.
    """
    from .core import FeatureBuilder

    sim = world.simulate(default_horizon(world.config) if horizon is None else horizon)
    rr = sim.ratings[Construct.RETENTIVE_RELEVANCE]
    rows = np.nonzero(sim.responded & (sim.survey_item >= 0) & (rr != 3))[0]
    builder = FeatureBuilder(sim.interactions, world.items(), world.users())
    fm = builder.proxy_matrix(world.user_ids[rows], sim.survey_item[rows], sim.survey_day, behavior=behavior)
    return fm, (rr[rows] >= 4).astype(np.int64), world.user_ids[rows]
