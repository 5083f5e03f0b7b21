"""Brute-force reference implementations used as test oracles.

Each oracle is written from the textbook definition with plain loops and
shares no code with the package.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np


def auc_pairwise(scores, labels) -> float:
    """Probability that a positive outscores a negative, ties counted half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def nearest_rank(values, pct: float) -> float:
    ordered = sorted(values)
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def mutual_information_counts(a, b) -> float:
    """Plug-in MI in nats over already-discrete sequences."""
    n = len(a)
    joint = Counter(zip(a, b))
    pa = Counter(a)
    pb = Counter(b)
    mi = 0.0
    for (x, y), c in joint.items():
        pxy = c / n
        mi += pxy * math.log(pxy / ((pa[x] / n) * (pb[y] / n)))
    return mi


def shapley_by_permutations(f, x, background) -> np.ndarray:
    """Average marginal contribution over every feature ordering.

    ``v(S)`` is the model output averaged over background rows with the
    features in ``S`` replaced by ``x``.
    """
    x = np.asarray(x, dtype=float)
    B = np.asarray(background, dtype=float)
    p = x.size

    def value(subset) -> float:
        Z = B.copy()
        for j in subset:
            Z[:, j] = x[j]
        return float(np.mean(f(Z)))

    phi = np.zeros(p)
    perms = list(itertools.permutations(range(p)))
    for order in perms:
        seen: list[int] = []
        prev = value(seen)
        for j in order:
            seen.append(j)
            cur = value(seen)
            phi[j] += cur - prev
            prev = cur
    return phi / len(perms)


def central_difference(fun, theta, eps: float = 1e-6) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += eps
        dn[i] -= eps
        grad[i] = (fun(up) - fun(dn)) / (2 * eps)
    return grad


def mean_logloss(margin, y) -> float:
    total = 0.0
    for m, t in zip(margin, y):
        p = 1.0 / (1.0 + math.exp(-m))
        total -= t * math.log(p) + (1 - t) * math.log(1 - p)
    return total / len(y)


def best_stump(x, g, h, lam: float, min_leaf: int):
    """Exhaustive best single split on one feature: ``(gain, threshold)``.

    Gain follows the second-order criterion ``G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)``.
    """
    values = sorted(set(x))
    G, H = sum(g), sum(h)
    best = (0.0, None)
    for lo, hi in zip(values[:-1], values[1:]):
        thr = (lo + hi) / 2
        left = [i for i, v in enumerate(x) if v <= thr]
        right = [i for i, v in enumerate(x) if v > thr]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        gl = sum(g[i] for i in left)
        hl = sum(h[i] for i in left)
        gain = gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - G ** 2 / (H + lam)
        if gain > best[0] + 1e-12:
            best = (gain, thr)
    return best


def precision_sweep(scores, labels, pos_target: float, neg_target: float):
    """Literal threshold sweep over observed values.

    Returns the smallest observed value ``s`` whose selection ``{p >= s}`` has
    positive precision at least ``pos_target`` and the largest ``s`` whose
    selection ``{p <= s}`` has negative precision at least ``neg_target``.
    """
    vals = sorted(set(scores))
    up = None
    for s in vals:
        sel = [y for p, y in zip(scores, labels) if p >= s]
        if sel and sum(sel) / len(sel) >= pos_target:
            up = s
            break
    dn = None
    for s in reversed(vals):
        sel = [y for p, y in zip(scores, labels) if p <= s]
        if sel and (len(sel) - sum(sel)) / len(sel) >= neg_target:
            dn = s
            break
    return up, dn


def smd(values, group, weights=None) -> float:
    x1 = [v for v, g in zip(values, group) if g]
    x0 = [v for v, g in zip(values, group) if not g]
    w = weights if weights is not None else [1.0] * len(values)
    w1 = [wi for wi, g in zip(w, group) if g]
    w0 = [wi for wi, g in zip(w, group) if not g]
    m1 = sum(a * b for a, b in zip(x1, w1)) / sum(w1)
    m0 = sum(a * b for a, b in zip(x0, w0)) / sum(w0)

    def var(xs):
        mu = sum(xs) / len(xs)
        return sum((v - mu) ** 2 for v in xs) / (len(xs) - 1)

    return (m1 - m0) / math.sqrt((var(x1) + var(x0)) / 2)
