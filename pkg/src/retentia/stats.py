"""Statistical primitives: correlations, Fisher z, mutual information,
bootstrap intervals, t-tests, effect sizes and classification metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats as _st


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    ci_low: float
    ci_high: float
    p_value: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TestResult:
    """Outcome of a hypothesis test.

    ``ci_low``/``ci_high`` bound the quantity being tested (mean difference for
    t-tests, difference of z-transforms for Fisher comparisons).
    """

    __test__ = False  # keep pytest from collecting this as a test class

    statistic: float
    p_value: float
    effect_size_d: float
    ci_low: float
    ci_high: float
    df: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _as_1d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def _two_sided_normal_p(z: float) -> float:
    return float(min(1.0, 2.0 * _st.norm.sf(abs(z))))


# --------------------------------------------------------------------------
# correlation


def pearson_r(x, y, level: float = 0.95) -> CorrelationResult:
    """Product-moment correlation with a Fisher-z confidence interval."""
    x = _as_1d(x, "x")
    y = _as_1d(y, "y")
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    n = x.size
    if n < 4:
        raise ValueError("pearson_r needs at least 4 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return CorrelationResult(r=r, n=n, ci_low=r, ci_high=r, p_value=0.0)
    z = math.atanh(r)
    se = 1.0 / math.sqrt(n - 3)
    q = _st.norm.ppf(0.5 + level / 2.0)
    return CorrelationResult(
        r=r,
        n=n,
        ci_low=math.tanh(z - q * se),
        ci_high=math.tanh(z + q * se),
        p_value=_two_sided_normal_p(z / se),
    )


def fisher_z_compare(r1: float, n1: int, r2: float, n2: int, level: float = 0.95) -> TestResult:
    """Compare two independent correlations on the Fisher z scale."""
    for r in (r1, r2):
        if not abs(r) < 1.0:
            raise ValueError(f"correlation must satisfy |r| < 1, got {r}")
    if n1 < 4 or n2 < 4:
        raise ValueError("each sample needs at least 4 observations")
    dz = math.atanh(r1) - math.atanh(r2)
    se = math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    stat = dz / se
    q = _st.norm.ppf(0.5 + level / 2.0)
    return TestResult(
        statistic=stat,
        p_value=_two_sided_normal_p(stat),
        effect_size_d=dz,
        ci_low=dz - q * se,
        ci_high=dz + q * se,
    )


# --------------------------------------------------------------------------
# mutual information


def equal_frequency_codes(x, bins: int) -> np.ndarray:
    """Discretize ``x`` into at most ``bins`` equal-frequency bins.

    Quantile edges that coincide (heavy ties, discrete inputs) are merged, so a
    binary variable always yields two codes regardless of ``bins``.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    x = _as_1d(x, "x")
    if x.size == 0:
        return np.zeros(0, dtype=np.int64)
    edges = np.unique(np.quantile(x, np.arange(1, bins) / bins))
    codes = np.searchsorted(edges, x, side="right")
    _, codes = np.unique(codes, return_inverse=True)
    return codes.astype(np.int64)


def mutual_information(x, y, x_bins: int = 5, y_bins: int = 5) -> float:
    """Plug-in mutual information in nats over an equal-frequency histogram."""
    x = _as_1d(x, "x")
    y = _as_1d(y, "y")
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    n = x.size
    if n == 0:
        return 0.0
    cx = equal_frequency_codes(x, x_bins)
    cy = equal_frequency_codes(y, y_bins)
    kx, ky = int(cx.max()) + 1, int(cy.max()) + 1
    joint = np.bincount(cx * ky + cy, minlength=kx * ky).reshape(kx, ky)
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    terms = []
    for a, b in zip(*np.nonzero(joint)):
        c = int(joint[a, b])
        # integer arithmetic keeps every term identical under argument swap;
        # fsum makes the total independent of summation order
        terms.append(c / n * math.log(c * n / (int(px[a]) * int(py[b]))))
    return max(0.0, math.fsum(terms))


def entropy(x, bins: int = 5) -> float:
    codes = equal_frequency_codes(x, bins)
    counts = np.bincount(codes)
    p = counts[counts > 0] / codes.size
    return float(-np.sum(p * np.log(p)))


# --------------------------------------------------------------------------
# bootstrap


def _resample_indices(seed: int, iteration: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration]))
    return rng.integers(0, n, size=n)


def bootstrap_distribution(
    samples,
    statistic: Callable[[np.ndarray], float] = np.mean,
    iterations: int = 1000,
    seed: int = 0,
) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("samples must be non-empty")
    if iterations < 100:
        raise ValueError("iterations must be >= 100")
    n = samples.shape[0]
    return np.array(
        [float(statistic(samples[_resample_indices(seed, i, n)])) for i in range(iterations)]
    )


def bootstrap_ci(
    samples,
    statistic: Callable[[np.ndarray], float] = np.mean,
    iterations: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval.

    Iteration ``i`` resamples with a generator seeded from ``(seed, i)``, so the
    interval is reproducible and independent of evaluation order.
    """
    dist = bootstrap_distribution(samples, statistic, iterations, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(dist, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bootstrap_diff_ci(
    a,
    b,
    iterations: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile interval for ``mean(a) - mean(b)`` resampling each arm independently."""
    a = _as_1d(a, "a")
    b = _as_1d(b, "b")
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if iterations < 100:
        raise ValueError("iterations must be >= 100")
    diffs = np.empty(iterations)
    for i in range(iterations):
        ia = _resample_indices(seed, 2 * i, a.size)
        ib = _resample_indices(seed, 2 * i + 1, b.size)
        diffs[i] = a[ia].mean() - b[ib].mean()
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(diffs, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# t-tests and effect sizes


def cohens_d_paired(a, b) -> float:
    diff = _as_1d(a, "a") - _as_1d(b, "b")
    sd = diff.std(ddof=1)
    if sd == 0.0:
        raise ValueError("zero variance of paired differences")
    return float(diff.mean() / sd)


def _pooled_sd(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = a.size, b.size
    return math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))


def cohens_d_independent(a, b) -> float:
    a = _as_1d(a, "a")
    b = _as_1d(b, "b")
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    sp = _pooled_sd(a, b)
    if sp == 0.0:
        raise ValueError("zero pooled variance")
    return float((a.mean() - b.mean()) / sp)


def paired_t_test(a, b, level: float = 0.95) -> TestResult:
    a = _as_1d(a, "a")
    b = _as_1d(b, "b")
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0.0:
        raise ValueError("zero variance of paired differences")
    se = sd / math.sqrt(n)
    mean = diff.mean()
    t = mean / se
    df = n - 1
    q = _st.t.ppf(0.5 + level / 2.0, df)
    return TestResult(
        statistic=float(t),
        p_value=float(min(1.0, 2.0 * _st.t.sf(abs(t), df))),
        effect_size_d=float(mean / sd),
        ci_low=float(mean - q * se),
        ci_high=float(mean + q * se),
        df=float(df),
    )


def two_sample_t_test(a, b, level: float = 0.95) -> TestResult:
    """Student's two-sample t-test with pooled variance; d uses the same pooled sd."""
    a = _as_1d(a, "a")
    b = _as_1d(b, "b")
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    sp = _pooled_sd(a, b)
    if sp == 0.0:
        raise ValueError("zero pooled variance")
    diff = a.mean() - b.mean()
    se = sp * math.sqrt(1.0 / a.size + 1.0 / b.size)
    df = a.size + b.size - 2
    t = diff / se
    q = _st.t.ppf(0.5 + level / 2.0, df)
    return TestResult(
        statistic=float(t),
        p_value=float(min(1.0, 2.0 * _st.t.sf(abs(t), df))),
        effect_size_d=float(diff / sp),
        ci_low=float(diff - q * se),
        ci_high=float(diff + q * se),
        df=float(df),
    )


# --------------------------------------------------------------------------
# classification metrics


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    return y.astype(np.int8)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = _as_1d(scores, "scores")
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if s.size == 0:
        raise ValueError("empty input")
    return float(np.mean((s >= threshold).astype(np.int8) == y))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    s = _as_1d(scores, "scores")
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = _st.rankdata(s)  # average ranks, multiples of 1/2
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def log_loss(probs, labels) -> float:
    p = np.clip(_as_1d(probs, "probs"), 1e-15, 1 - 1e-15)
    y = _binary_labels(labels)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def significance_stars(p_value: Optional[float]) -> str:
    if p_value is None:
        return ""
    if p_value < 0.001:
        return "***"
    if p_value < 0.01:
        return "**"
    if p_value < 0.05:
        return "*"
    return ""
