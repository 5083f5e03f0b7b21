"""Gradient-boosted decision trees for binary log-loss.

Trees are grown level-wise with exact greedy split search over the sorted
unique values of every feature. Leaves take the regularized Newton step
``sum(g) / (sum(h) + l2_leaf)`` with ``g = y - p`` and ``h = p (1 - p)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .validation import check_binary_labels, check_feature_input

LOGIT_CLAMP = 15.0


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 4
    min_samples_leaf: int = 20
    l2_leaf: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.l2_leaf < 0:
            raise ValueError("l2_leaf must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def clamp_margin(margin):
    return np.clip(margin, -LOGIT_CLAMP, LOGIT_CLAMP)


def logloss_from_margin(margin: np.ndarray, y: np.ndarray) -> float:
    """Mean binary log-loss of log-odds ``margin``; stable for large |margin|."""
    m = np.asarray(margin, dtype=float)
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


def logloss_grad_hess(margin: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row residual ``g = y - p`` (the negative gradient) and hessian ``p (1 - p)``."""
    p = sigmoid(np.asarray(margin, dtype=float))
    return y - p, p * (1.0 - p)


MAX_HIST_BINS = 256


@numba.njit(cache=True)
def _node_totals(node_of, g, h, n_nodes):
    node_g = np.zeros(n_nodes)
    node_h = np.zeros(n_nodes)
    node_c = np.zeros(n_nodes, dtype=np.int64)
    for i in range(node_of.shape[0]):
        nd = node_of[i]
        if nd >= 0:
            node_g[nd] += g[i]
            node_h[nd] += h[i]
            node_c[nd] += 1
    return node_g, node_h, node_c


@numba.njit(cache=True)
def _sorted_splits(feats, xs, order, node_of, g, h, node_g, node_h, node_c, min_leaf, lam,
                   best_gain, best_feat, best_thr):
    # exact scan over presorted values; used for high-cardinality features
    n = order.shape[1]
    n_nodes = node_g.shape[0]
    gl = np.zeros(n_nodes)
    hl = np.zeros(n_nodes)
    cl = np.zeros(n_nodes, dtype=np.int64)
    last = np.zeros(n_nodes)
    bg = np.zeros(n_nodes)
    bt = np.zeros(n_nodes)
    for r in range(feats.shape[0]):
        f = feats[r]
        gl[:] = 0.0
        hl[:] = 0.0
        cl[:] = 0
        bg[:] = 0.0
        for k in range(n):
            i = order[r, k]
            nd = node_of[i]
            if nd < 0:
                continue
            v = xs[r, k]
            c = cl[nd]
            if c > 0 and v != last[nd]:
                cr = node_c[nd] - c
                if c >= min_leaf and cr >= min_leaf:
                    a = gl[nd]
                    ga = node_g[nd] - a
                    gain = (a * a / (hl[nd] + lam) + ga * ga / (node_h[nd] - hl[nd] + lam)
                            - node_g[nd] * node_g[nd] / (node_h[nd] + lam))
                    if gain > bg[nd]:
                        bg[nd] = gain
                        bt[nd] = last[nd]
            gl[nd] += g[i]
            hl[nd] += h[i]
            cl[nd] = c + 1
            last[nd] = v
        for nd in range(n_nodes):
            _offer(best_gain, best_feat, best_thr, nd, bg[nd], f, bt[nd])


@numba.njit(cache=True)
def _build_hist(codes, node_of, want, g, h, n_nodes, total):
    # interleaved (g, h, count) so one row update touches one cache line per feature
    hist = np.zeros((n_nodes, total, 3))
    n, n_low = codes.shape
    for i in range(n):
        nd = node_of[i]
        if nd < 0 or not want[nd]:
            continue
        gi = g[i]
        hi = h[i]
        for r in range(n_low):
            cell = hist[nd, codes[i, r]]
            cell[0] += gi
            cell[1] += hi
            cell[2] += 1.0
    return hist


@numba.njit(cache=True)
def _hist_splits(feats, uniq, bin_start, hist, node_g, node_h, node_c, min_leaf, lam,
                 best_gain, best_feat, best_thr):
    # exact histogram scan; valid because every distinct value owns a bin.
    # bins are ragged: feature r owns uniq[bin_start[r]:bin_start[r + 1]]
    n_nodes = node_g.shape[0]
    for r in range(feats.shape[0]):
        f = feats[r]
        lo = bin_start[r]
        hi_ = bin_start[r + 1]
        for nd in range(n_nodes):
            parent = node_g[nd] * node_g[nd] / (node_h[nd] + lam)
            a = 0.0
            b = 0.0
            c = 0
            bg = 0.0
            bt = 0.0
            for j in range(lo, hi_ - 1):
                cnt = int(hist[nd, j, 2] + 0.5)
                if cnt == 0:
                    continue
                a += hist[nd, j, 0]
                b += hist[nd, j, 1]
                c += cnt
                cr = node_c[nd] - c
                if cr == 0:
                    break
                if c >= min_leaf and cr >= min_leaf:
                    ga = node_g[nd] - a
                    gain = a * a / (b + lam) + ga * ga / (node_h[nd] - b + lam) - parent
                    if gain > bg:
                        bg = gain
                        bt = uniq[j]
            _offer(best_gain, best_feat, best_thr, nd, bg, f, bt)


@numba.njit(cache=True)
def _offer(best_gain, best_feat, best_thr, nd, gain, f, thr):
    # larger gain wins; on an exact tie the lower feature index wins
    if gain <= 0.0:
        return
    if gain > best_gain[nd] or (gain == best_gain[nd] and (best_feat[nd] < 0 or f < best_feat[nd])):
        best_gain[nd] = gain
        best_feat[nd] = f
        best_thr[nd] = thr


@numba.njit(cache=True)
def _partition(X, node_of, tid_of, remap, child_tid, feat, thr):
    for i in range(node_of.shape[0]):
        s = node_of[i]
        if s < 0:
            continue
        ns = remap[s]
        if ns < 0:
            node_of[i] = -1
            continue
        right = 1 if X[i, feat[s]] > thr[s] else 0
        node_of[i] = ns + right
        tid_of[i] = child_tid[s] + right


@numba.njit(cache=True)
def _predict_raw(X, feature, threshold, left, right, value, offsets, scale):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i] += scale * value[base + node]
    return out


class _Tree:
    """Flat array tree; ``feature == -1`` marks a leaf."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def predict(self, X: np.ndarray) -> np.ndarray:
        offsets = np.array([0, self.n_nodes], dtype=np.int64)
        return _predict_raw(X, self.feature, self.threshold, self.left, self.right, self.value, offsets, 1.0)

    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}

    def to_nested(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"leaf_value": float(self.value[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_nested(int(self.left[node])),
            "right": self.to_nested(int(self.right[node])),
        }

    @classmethod
    def from_nested(cls, spec: dict) -> "_Tree":
        feature, threshold, left, right, value = [], [], [], [], []

        def visit(node: dict) -> int:
            idx = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf_value" in node:
                value[idx] = float(node["leaf_value"])
            else:
                feature[idx] = int(node["feature"])
                threshold[idx] = float(node["threshold"])
                left[idx] = visit(node["left"])
                right[idx] = visit(node["right"])
            return idx

        visit(spec)
        return cls(feature, threshold, left, right, value)


class _SplitIndex:
    """Per-fit lookup structures for split search."""

    def __init__(self, X: np.ndarray):
        n, p = X.shape
        uniques = [np.unique(X[:, f]) for f in range(p)]
        cap = max(MAX_HIST_BINS, n // 8)
        low = [f for f in range(p) if uniques[f].size <= cap]
        high = [f for f in range(p) if uniques[f].size > cap]
        self.low = np.array(low, dtype=np.int64)
        self.high = np.array(high, dtype=np.int64)
        sizes = [uniques[f].size for f in low]
        self.bin_start = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.uniq = np.concatenate([uniques[f] for f in low]) if low else np.zeros(0)
        self.codes = np.zeros((n, len(low)), dtype=np.int32)
        for r, f in enumerate(low):
            self.codes[:, r] = self.bin_start[r] + np.searchsorted(uniques[f], X[:, f])
        if high:
            Xh = X[:, high]
            order = np.argsort(Xh, axis=0, kind="stable")
            self.order = order.T.copy()
            self.xs = np.take_along_axis(Xh, order, axis=0).T.copy()
        else:
            self.order = np.zeros((0, n), dtype=np.int64)
            self.xs = np.zeros((0, n))


def _level_hist(index, node_of, g, h, node_c, parent_hist, parent_slot) -> np.ndarray:
    """Histograms for the current frontier.

    Below the root only the smaller child of each sibling pair is accumulated
    from rows; its sibling is the parent histogram minus that child.
    """
    k = node_c.size
    total = index.uniq.size
    if parent_hist is None:
        return _build_hist(index.codes, node_of, np.ones(k, dtype=np.bool_), g, h, k, total)
    left = np.arange(0, k, 2)
    small_is_left = node_c[left] <= node_c[left + 1]
    small = np.where(small_is_left, left, left + 1)
    large = np.where(small_is_left, left + 1, left)
    want = np.zeros(k, dtype=np.bool_)
    want[small] = True
    hist = _build_hist(index.codes, node_of, want, g, h, k, total)
    for lg, sm in zip(large, small):
        np.subtract(parent_hist[parent_slot[lg]], hist[sm], out=hist[lg])
    return hist


def _grow_tree(X, index: _SplitIndex, g, h, params: GbtParams) -> tuple[_Tree, np.ndarray]:
    n = X.shape[0]
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of = np.zeros(n, dtype=np.int64)  # frontier slot per row, -1 once settled
    tid_of = np.zeros(n, dtype=np.int64)  # tree node per row
    frontier = [0]
    parent_hist = None
    parent_slot = np.zeros(0, dtype=np.int64)  # previous-level slot of each frontier slot
    lam = params.l2_leaf
    for depth in range(params.max_depth + 1):
        k = len(frontier)
        node_g, node_h, node_c = _node_totals(node_of, g, h, k)
        for j, tid in enumerate(frontier):
            value[tid] = node_g[j] / (node_h[j] + lam)
        if depth == params.max_depth:
            break
        gain = np.zeros(k)
        feat = np.full(k, -1, dtype=np.int64)
        thr = np.zeros(k)
        if index.low.size:
            hist = _level_hist(index, node_of, g, h, node_c, parent_hist, parent_slot)
            _hist_splits(index.low, index.uniq, index.bin_start, hist,
                         node_g, node_h, node_c, params.min_samples_leaf, lam, gain, feat, thr)
            parent_hist = hist
        if index.high.size:
            _sorted_splits(index.high, index.xs, index.order, node_of, g, h,
                           node_g, node_h, node_c, params.min_samples_leaf, lam, gain, feat, thr)
        if not (feat >= 0).any():
            break
        remap = np.full(k, -1, dtype=np.int64)
        child_tid = np.full(k, -1, dtype=np.int64)
        next_frontier = []
        for j, tid in enumerate(frontier):
            if feat[j] < 0:
                continue
            lid = len(feature)
            feature[tid] = int(feat[j])
            threshold[tid] = float(thr[j])
            left[tid] = lid
            right[tid] = lid + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
            remap[j] = len(next_frontier)
            child_tid[j] = lid
            next_frontier.extend([lid, lid + 1])
        _partition(X, node_of, tid_of, remap, child_tid, feat, thr)
        parent_slot = np.repeat(np.nonzero(remap >= 0)[0], 2)
        frontier = next_frontier
    return _Tree(feature, threshold, left, right, value), tid_of


class GradientBoostedTreesClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier boosting depth-limited regression trees on log-loss.

    Parameters mirror :class:`GbtParams`. Predicted probabilities are
    ``sigmoid(base_score + learning_rate * sum_k f_k(x))`` with the log-odds
    clamped to ``[-15, 15]``.
    """

    def __init__(
        self,
        n_trees: int = 200,
        learning_rate: float = 0.1,
        max_depth: int = 4,
        min_samples_leaf: int = 20,
        l2_leaf: float = 1.0,
        seed: int = 0,
    ):
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.l2_leaf = l2_leaf
        self.seed = seed

    @property
    def params(self) -> GbtParams:
        return GbtParams(
            n_trees=self.n_trees,
            learning_rate=self.learning_rate,
            max_depth=self.max_depth,
            min_samples_leaf=self.min_samples_leaf,
            l2_leaf=self.l2_leaf,
            seed=self.seed,
        )

    def fit(self, X, y, feature_names: Optional[Sequence[str]] = None):
        params = self.params
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        y = check_binary_labels(y, n=X.shape[0])
        if X.shape[0] < 2 * params.min_samples_leaf:
            raise ValueError(
                f"need at least 2*min_samples_leaf={2 * params.min_samples_leaf} rows, got {X.shape[0]}"
            )
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.feature_schema_ = _schema(feature_names, X.shape[1])
        prevalence = y.mean()
        self.base_score_ = float(np.log(prevalence / (1.0 - prevalence)))
        yf = y.astype(np.float64)

        index = _SplitIndex(X)

        margin = np.full(X.shape[0], self.base_score_)
        loss = logloss_from_margin(clamp_margin(margin), yf)
        self.trees_: list[_Tree] = []
        self.train_loss_ = [loss]
        for _ in range(params.n_trees):
            g, h = logloss_grad_hess(clamp_margin(margin), yf)
            tree, leaf_of = _grow_tree(X, index, g, h, params)
            step = tree.value[leaf_of]
            new_margin = margin + params.learning_rate * step
            new_loss = logloss_from_margin(clamp_margin(new_margin), yf)
            # shrink the tree until the round does not increase training loss
            halvings = 0
            while new_loss > loss and halvings < 60:
                tree.value *= 0.5
                step *= 0.5
                new_margin = margin + params.learning_rate * step
                new_loss = logloss_from_margin(clamp_margin(new_margin), yf)
                halvings += 1
            assert new_loss <= loss, "boosting round increased training log-loss"
            margin, loss = new_margin, new_loss
            self.trees_.append(tree)
            self.train_loss_.append(loss)
        self._pack()
        return self

    def _pack(self) -> None:
        sizes = [t.n_nodes for t in self.trees_]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if self.trees_:
            cat = lambda attr: np.concatenate([getattr(t, attr) for t in self.trees_])
            self._flat = tuple(cat(a) for a in ("feature", "threshold", "left", "right", "value"))
        else:
            empty_i = np.zeros(0, dtype=np.int64)
            empty_f = np.zeros(0)
            self._flat = (empty_i, empty_f, empty_i, empty_i, empty_f)

    def decision_function(self, X) -> np.ndarray:
        """Clamped log-odds of the positive class."""
        check_is_fitted(self, "trees_")
        X = check_feature_input(X, self.feature_schema_)
        raw = _predict_raw(X, *self._flat, self._offsets, float(self.learning_rate))
        return clamp_margin(self.base_score_ + raw)

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def used_features(self) -> set[int]:
        check_is_fitted(self, "trees_")
        out: set[int] = set()
        for t in self.trees_:
            out |= t.used_features()
        return out

    # -- serialization -------------------------------------------------------

    def to_payload(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "params": self.params.to_dict(),
            "base_score": self.base_score_,
            "n_features": self.n_features_in_,
            "trees": [t.to_nested() for t in self.trees_],
            "train_loss": list(self.train_loss_),
        }

    @classmethod
    def from_payload(cls, payload: dict, feature_schema: Sequence[str]):
        model = cls(**payload["params"])
        model.classes_ = np.array([0, 1])
        model.n_features_in_ = int(payload["n_features"])
        model.feature_schema_ = tuple(feature_schema)
        model.base_score_ = float(payload["base_score"])
        model.trees_ = [_Tree.from_nested(t) for t in payload["trees"]]
        model.train_loss_ = [float(v) for v in payload.get("train_loss", [])]
        model._pack()
        return model


def _schema(feature_names, n_features: int) -> tuple[str, ...]:
    if feature_names is None:
        return tuple(f"x{i}" for i in range(n_features))
    names = tuple(str(n) for n in feature_names)
    if len(names) != n_features:
        raise ValueError(f"{len(names)} feature names for {n_features} columns")
    if len(set(names)) != len(names):
        raise ValueError("feature names must be unique")
    return names


def train_gbt(X, y, params: GbtParams = GbtParams(), feature_names=None) -> GradientBoostedTreesClassifier:
    return GradientBoostedTreesClassifier(**params.to_dict()).fit(X, y, feature_names=feature_names)


def predict_proba(model: GradientBoostedTreesClassifier, x) -> np.ndarray | float:
    """Positive-class probability for one FeatureVector/row or a batch."""
    arr = np.asarray(x.values if hasattr(x, "values") and hasattr(x, "names") else x, dtype=float)
    p = model.predict_proba(x)[:, 1]
    return float(p[0]) if arr.ndim == 1 else p
