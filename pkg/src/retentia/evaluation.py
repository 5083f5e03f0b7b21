"""Cross-validated paired model comparisons, user segments and Shapley attribution."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import (Construct, FeatureBuilder, FeatureMatrix, InteractionTable, ItemTable, RetentionLabel,
                   SurveyResponse, UserTable, survey_names)
from .gbt import GbtParams, GradientBoostedTreesClassifier
from .stats import TestResult, accuracy, bootstrap_ci, cohens_d_paired, paired_t_test, roc_auc
from .validation import check_binary_labels

SEGMENTS = ("overall", "low_signal")
METRICS = ("accuracy", "roc_auc")
NO_SIGNAL = "no incremental signal"


# --------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class RetentionDataset:
    """Survey-day features with next-day retention labels, one row per user."""

    features: FeatureMatrix
    labels: np.ndarray
    user_ids: np.ndarray
    engagement_total: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.features.n_rows
        for name in ("labels", "user_ids", "engagement_total"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from the feature rows")

    def __len__(self) -> int:
        return self.features.n_rows

    def take(self, rows) -> "RetentionDataset":
        return RetentionDataset(self.features.take(rows), self.labels[rows], self.user_ids[rows],
                                self.engagement_total[rows], None if self.weights is None else self.weights[rows])

    def constructs(self) -> tuple[Construct, ...]:
        return tuple(c for c in Construct if f"s_{c.short}_present" in self.features.names)

    def columns_for(self, base_groups: Iterable[str], construct: Optional[Construct] = None) -> tuple[str, ...]:
        groups = set(base_groups) - {"S"}
        cols = [n for n, g in zip(self.features.names, self.features.groups) if g in groups]
        if construct is not None:
            cols += list(survey_names(Construct.parse(construct)))
        return tuple(cols)


def build_retention_dataset(interactions: InteractionTable, surveys: Sequence[SurveyResponse],
                            labels: Sequence[RetentionLabel], items: Optional[ItemTable] = None,
                            users: Optional[UserTable] = None,
                            constructs: Sequence = tuple(Construct)) -> RetentionDataset:
    """One row per surveyed user that also has a retention label for the following day."""
    constructs = [Construct.parse(c) for c in constructs]
    by_user: dict = {}
    for s in surveys:
        entry = by_user.setdefault(s.user_id, {"item": s.item_id, "day": s.timestamp, "ratings": {}})
        entry["ratings"][s.construct] = s.rating
    label_of = {(l.user_id, l.day): l.retained for l in labels}
    keys, items_, days, ys = [], [], [], []
    for u in sorted(by_user, key=lambda k: (str(type(k)), k)):
        entry = by_user[u]
        y = label_of.get((u, entry["day"] + 1))
        if y is None:
            continue
        keys.append(u)
        items_.append(entry["item"])
        days.append(entry["day"])
        ys.append(int(y))
    if not keys:
        raise ValueError("no surveyed user has a next-day retention label")
    ratings = {c: np.array([by_user[u]["ratings"].get(c, 0) for u in keys], dtype=np.int64) for c in constructs}
    builder = FeatureBuilder(interactions, items, users)
    fm = builder.retention_matrix(np.array(keys), np.array(items_), np.array(days), ratings)
    return RetentionDataset(fm, np.array(ys, dtype=np.int64), np.array(keys),
                            fm.values[:, fm.names.index("h_views")].copy())


def segment_filter(dataset: RetentionDataset, segment: str, percentile: float = 50.0) -> RetentionDataset:
    """``overall`` is the identity; ``low_signal`` keeps rows whose 28-day engagement
    total is strictly below the population ``percentile`` (median by default)."""
    return dataset.take(segment_mask(dataset.engagement_total, segment, percentile))


def segment_mask(engagement_total, segment: str, percentile: float = 50.0) -> np.ndarray:
    e = np.asarray(engagement_total, dtype=float)
    if segment == "overall":
        return np.ones(e.size, dtype=bool)
    if segment == "low_signal":
        if e.size == 0:
            return np.zeros(0, dtype=bool)
        return e < np.percentile(e, percentile)
    raise ValueError(f"unknown segment {segment!r}; expected one of {SEGMENTS}")


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k: int
    seed: int

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.folds == fold
        return np.nonzero(~test)[0], np.nonzero(test)[0]


def stratified_kfold(labels, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Shuffle each class and deal its rows round-robin across folds."""
    y = check_binary_labels(labels, require_both=False)
    if k < 2:
        raise ValueError("k must be >= 2")
    counts = np.bincount(y, minlength=2)
    if counts.min() < k:
        raise ValueError(f"each class needs at least k={k} rows, got {counts.tolist()}")
    rng = np.random.default_rng(seed)
    folds = np.empty(y.size, dtype=np.int64)
    offset = 0
    for cls in (1, 0):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k  # keeps fold sizes within one row
    return FoldAssignment(folds, k, seed)


# --------------------------------------------------------------------------
# paired comparison


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    baseline: tuple[float, ...]
    augmented: tuple[float, ...]
    delta: tuple[float, ...]
    mean_delta: float
    ci_low: float
    ci_high: float
    test: Optional[TestResult]
    cohens_d: Optional[float]
    status: str

    @property
    def p_value(self) -> float:
        return 1.0 if self.test is None else self.test.p_value

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "baseline": list(self.baseline),
            "augmented": list(self.augmented),
            "delta": list(self.delta),
            "mean_delta": self.mean_delta,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "test": None if self.test is None else self.test.to_dict(),
            "cohens_d": self.cohens_d,
            "status": self.status,
        }


@dataclass(frozen=True)
class DeltaReport:
    construct: Optional[str]
    segment: str
    k: int
    metrics: Mapping[str, MetricDelta]
    n_rows: int

    def __getitem__(self, metric: str) -> MetricDelta:
        return self.metrics[metric]

    def to_dict(self) -> dict:
        return {
            "construct": self.construct,
            "segment": self.segment,
            "k": self.k,
            "n_rows": self.n_rows,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
        }


def _delta(metric: str, base: np.ndarray, aug: np.ndarray, iterations: int, seed: int) -> MetricDelta:
    d = aug - base
    mean_delta = float(np.mean(d))
    lo, hi = bootstrap_ci(d, np.mean, iterations=iterations, seed=seed)
    try:
        test = paired_t_test(aug, base)
        cd = cohens_d_paired(aug, base)
        status = "ok"
    except ValueError:
        test, cd, status = None, None, NO_SIGNAL
    return MetricDelta(metric, tuple(map(float, base)), tuple(map(float, aug)), tuple(map(float, d)),
                       mean_delta, float(lo), float(hi), test, cd, status)


def _fold_metrics(p: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    auc = roc_auc(p, y) if 0 < y.sum() < y.size else float("nan")
    return accuracy(p, y, 0.5), auc


def paired_comparisons(dataset: RetentionDataset, base_groups: Iterable[str] = ("H", "R", "U", "C", "D"),
                       constructs: Sequence[Optional[Construct]] = tuple(Construct),
                       params: GbtParams = GbtParams(), k: int = 10, seed: int = 0,
                       segments: Sequence[str] = ("overall",), bootstrap_iterations: int = 1000,
                       n_jobs: int = 1) -> dict:
    """Fold-paired baseline vs survey-augmented models for several constructs.

    Each fold trains one baseline model shared by every construct comparison.
    Returns ``{(construct_value_or_None, segment): DeltaReport}``.
    """
    base_groups = tuple(base_groups)
    folds = stratified_kfold(dataset.labels, k=k, seed=seed)
    X_all = dataset.features
    y = dataset.labels
    masks = {s: segment_mask(dataset.engagement_total, s) for s in segments}
    base_cols = dataset.columns_for(base_groups)
    variants = [None] + [Construct.parse(c) for c in constructs if c is not None]
    col_sets = {v: (base_cols if v is None else dataset.columns_for(base_groups, v)) for v in variants}
    mats = {v: X_all.columns(cols).values for v, cols in col_sets.items()}

    def run_fold(j: int) -> dict:
        train, test = folds.split(j)
        out = {}
        for v in variants:
            model = GradientBoostedTreesClassifier(**params.to_dict()).fit(mats[v][train], y[train])
            p = model.predict_proba(mats[v][test])[:, 1]
            for s, mask in masks.items():
                sel = mask[test]
                out[(v, s)] = _fold_metrics(p[sel], y[test][sel])
        return out

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            per_fold = list(pool.map(run_fold, range(k)))
    else:
        per_fold = [run_fold(j) for j in range(k)]

    reports = {}
    wanted = [None] if list(constructs) == [None] else [c for c in variants if c is not None]
    for v in wanted:
        for s in segments:
            metrics = {}
            for m_i, metric in enumerate(METRICS):
                base = np.array([per_fold[j][(None, s)][m_i] for j in range(k)])
                aug = np.array([per_fold[j][(v, s)][m_i] for j in range(k)])
                metrics[metric] = _delta(metric, base, aug, bootstrap_iterations, seed)
            key = None if v is None else v.value
            reports[(key, s)] = DeltaReport(key, s, k, metrics, int(masks[s].sum()))
    return reports


def paired_comparison(dataset: RetentionDataset, base_groups: Iterable[str] = ("H", "R", "U", "C", "D"),
                      survey_construct: Optional[Construct] = None, params: GbtParams = GbtParams(),
                      k: int = 10, seed: int = 0, segment: str = "overall",
                      bootstrap_iterations: int = 1000) -> DeltaReport:
    """Baseline on ``base_groups`` against baseline plus one construct's survey block.

    With ``survey_construct=None`` the augmented model equals the baseline and
    every fold delta is zero.
    """
    key = None if survey_construct is None else Construct.parse(survey_construct)
    reports = paired_comparisons(dataset, base_groups, [key], params, k, seed, (segment,), bootstrap_iterations)
    return reports[(None if key is None else key.value, segment)]


def baseline_summary(reports: Mapping, segment: str) -> dict:
    """Per-fold baseline metrics from any report of the segment (they share baselines)."""
    for (c, s), rep in reports.items():
        if s == segment:
            return {m: rep.metrics[m].baseline for m in METRICS}
    raise KeyError(segment)


# --------------------------------------------------------------------------
# Shapley values


@dataclass(frozen=True)
class ShapReport:
    phi: np.ndarray
    baseline: float
    prediction: float
    feature_names: tuple[str, ...]
    mode: str
    n_permutations: int = 0

    @property
    def efficiency_gap(self) -> float:
        return float(abs(self.phi.sum() + self.baseline - self.prediction))

    def to_dict(self) -> dict:
        return {
            "phi": dict(zip(self.feature_names, map(float, self.phi))),
            "baseline": self.baseline,
            "prediction": self.prediction,
            "mode": self.mode,
            "n_permutations": self.n_permutations,
        }


MAX_EXACT_FEATURES = 15


def _predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_proba"):
        return lambda X: model.predict_proba(X)[:, 1]
    if callable(model):
        return lambda X: np.asarray(model(X), dtype=float)
    raise TypeError("model must expose predict_proba or be callable")


def _as_rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(x, "values", x), dtype=float))


def shap_values(model, x, background, mode: str = "exact", seed: int = 0,
                n_permutations: int = 2000, feature_names: Optional[Sequence[str]] = None) -> ShapReport:
    """Interventional Shapley values in probability space.

    Absent features take their values from background rows and the model
    output is averaged over the background. ``exact`` enumerates every subset
    (at most 15 features); ``sampled`` averages over random feature orderings,
    pairing ordering ``i`` with background row ``i mod m``.
    """
    f = _predictor(model)
    x = _as_rows(x)[0]
    B = _as_rows(background)
    if B.shape[0] == 0:
        raise ValueError("background must be non-empty")
    p = x.size
    if B.shape[1] != p:
        raise ValueError("background and x have different feature counts")
    names = tuple(feature_names) if feature_names is not None else tuple(
        getattr(model, "feature_names_", None) or (f"x{i}" for i in range(p)))
    if mode == "exact":
        if p > MAX_EXACT_FEATURES:
            raise ValueError(f"exact mode supports at most {MAX_EXACT_FEATURES} features (got {p}); "
                             "use mode='sampled'")
        phi, base, pred = _exact_shap(f, x, B)
        return ShapReport(phi, base, pred, names, "exact")
    if mode == "sampled":
        if n_permutations < 2000:
            raise ValueError("sampled mode needs at least 2000 permutations")
        phi, base, pred = _sampled_shap(f, x, B, n_permutations, seed)
        return ShapReport(phi, base, pred, names, "sampled", n_permutations)
    raise ValueError(f"unknown mode {mode!r}; expected 'exact' or 'sampled'")


def _exact_shap(f, x, B) -> tuple[np.ndarray, float, float]:
    p = x.size
    m = B.shape[0]
    n_sub = 1 << p
    masks = np.arange(n_sub)
    bits = ((masks[:, None] >> np.arange(p)[None, :]) & 1).astype(bool)
    value = np.empty(n_sub)
    chunk = max(1, 200_000 // m)
    for start in range(0, n_sub, chunk):
        sel = bits[start:start + chunk]
        Z = np.where(sel[:, None, :], x[None, None, :], B[None, :, :]).reshape(-1, p)
        value[start:start + sel.shape[0]] = f(Z).reshape(sel.shape[0], m).mean(axis=1)
    size = bits.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(p - s - 1) / math.factorial(p) if s < p else 0.0
                       for s in range(p + 1)])
    phi = np.zeros(p)
    for j in range(p):
        without = masks[~bits[:, j]]
        contrib = weight[size[without]] * (value[without | (1 << j)] - value[without])
        phi[j] = math.fsum(contrib)
    return phi, float(value[0]), float(f(x[None, :])[0])


def _sampled_shap(f, x, B, n_perm: int, seed: int) -> tuple[np.ndarray, float, float]:
    p = x.size
    m = B.shape[0]
    rng = np.random.default_rng(seed)
    # round up so every background row is used equally often
    n_perm = int(math.ceil(n_perm / m) * m)
    orders = np.array([rng.permutation(p) for _ in range(n_perm)])
    bg = B[np.arange(n_perm) % m]
    # row t of permutation i has the first t features of the ordering set to x
    Z = np.repeat(bg[:, None, :], p + 1, axis=1)
    for t in range(1, p + 1):
        cols = orders[:, :t]
        rows = np.repeat(np.arange(n_perm), t)
        Z[rows, t, cols.ravel()] = x[cols.ravel()]
    vals = f(Z.reshape(-1, p)).reshape(n_perm, p + 1)
    steps = np.diff(vals, axis=1)
    phi = np.zeros(p)
    np.add.at(phi, orders.ravel(), steps.ravel())
    phi /= n_perm
    base = float(f(B).mean())
    return phi, base, float(f(x[None, :])[0])


def shap_summary(model, X: np.ndarray, background: np.ndarray, rows: Sequence[int], feature_names: Sequence[str],
                 seed: int = 0, n_permutations: int = 2000) -> dict:
    """Mean signed and absolute attributions over a set of explained rows."""
    phis = []
    gaps = []
    for i, r in enumerate(rows):
        rep = shap_values(model, X[r], background, mode="sampled", seed=seed + i,
                          n_permutations=n_permutations, feature_names=feature_names)
        phis.append(rep.phi)
        gaps.append(rep.efficiency_gap)
    P = np.array(phis)
    return {
        "feature_names": list(feature_names),
        "mean_phi": P.mean(axis=0).tolist(),
        "mean_abs_phi": np.abs(P).mean(axis=0).tolist(),
        "max_efficiency_gap": float(max(gaps)) if gaps else 0.0,
        "n_explained": len(rows),
        "phi": P.tolist(),
    }
