"""L2-regularized logistic intent scorer and precision-targeted thresholds."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import FeatureMatrix
from .gbt import sigmoid
from .validation import check_binary_labels, check_feature_input


class ProxyConvergenceError(RuntimeError):
    def __init__(self, grad_norm: float, iterations: int):
        super().__init__(f"proxy training did not converge after {iterations} iterations "
                         f"(gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


def regularized_logloss(theta: np.ndarray, A: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Mean log-loss plus ``lam * ||w||^2``; ``theta[0]`` is the unpenalized bias."""
    eta = A @ theta
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + lam * theta[1:] @ theta[1:])


def regularized_logloss_grad(theta: np.ndarray, A: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    p = sigmoid(A @ theta)
    g = A.T @ (p - y) / y.size
    g[1:] += 2.0 * lam * theta[1:]
    return g


class ProxyLogisticRegression(ClassifierMixin, BaseEstimator):
    """Logistic regression fit by damped Newton on standardized features.

    The penalty is ``lam * ||w||^2`` on the standardized weights with the bias
    left free. Coefficients are reported on the original feature scale.

    Attributes
    ----------
    coef_ : ndarray of shape (d,)
    intercept_ : float
    objective_path_ : list of float
        Objective value after each Newton iteration (non-increasing).
    """

    def __init__(self, lam: float = 1e-3, tol: float = 1e-8, max_iter: int = 500):
        self.lam = lam
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, feature_names: Optional[Sequence[str]] = None):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        X = check_array(X, dtype=np.float64)
        y = check_binary_labels(y, n=X.shape[0]).astype(np.float64)
        n, d = X.shape
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        const = scale == 0
        scale[const] = 1.0
        A = np.column_stack([np.ones(n), (X - mean) / scale])
        A[:, 1:][:, const] = 0.0
        theta = np.zeros(d + 1)
        prev = y.mean()
        theta[0] = np.log(prev / (1 - prev))
        obj = regularized_logloss(theta, A, y, self.lam)
        path = [obj]
        reg = np.full(d + 1, 2.0 * self.lam)
        reg[0] = 0.0
        gnorm = np.inf
        it = 0
        for it in range(1, self.max_iter + 1):
            g = regularized_logloss_grad(theta, A, y, self.lam)
            gnorm = float(np.linalg.norm(g))
            if gnorm <= self.tol:
                it -= 1
                break
            p = sigmoid(A @ theta)
            H = (A * (p * (1 - p))[:, None]).T @ A / n + np.diag(reg)
            # constant columns are all-zero; keep H invertible
            H[np.arange(1, d + 1)[const], np.arange(1, d + 1)[const]] += 1.0
            step = -np.linalg.solve(H, g)
            t = 1.0
            while True:
                cand = theta + t * step
                cand_obj = regularized_logloss(cand, A, y, self.lam)
                if cand_obj <= obj + 1e-4 * t * float(g @ step) or t < 1e-12:
                    break
                t *= 0.5
            if cand_obj > obj:
                cand, cand_obj = theta, obj
            theta, obj = cand, cand_obj
            path.append(obj)
        else:
            g = regularized_logloss_grad(theta, A, y, self.lam)
            gnorm = float(np.linalg.norm(g))
            if gnorm > self.tol:
                raise ProxyConvergenceError(gnorm, self.max_iter)
        self.standardized_coef_ = theta[1:].copy()
        self.coef_ = np.where(const, 0.0, theta[1:] / scale)
        self.intercept_ = float(theta[0] - np.sum(self.coef_ * mean))
        self.final_loss_ = obj
        self.n_iter_ = it
        self.grad_norm_ = gnorm
        self.objective_path_ = path
        self.n_features_in_ = d
        self.feature_names_ = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(d))
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_feature_input(X, self.feature_names_)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def to_payload(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "weights": [float(w) for w in self.coef_],
            "bias": self.intercept_,
            "lambda": float(self.lam),
            "tol": float(self.tol),
            "max_iter": int(self.max_iter),
            "final_loss": self.final_loss_,
            "iterations": int(self.n_iter_),
        }

    @classmethod
    def from_payload(cls, payload: dict, feature_schema: Sequence[str]) -> "ProxyLogisticRegression":
        model = cls(lam=payload["lambda"], tol=payload.get("tol", 1e-8), max_iter=payload.get("max_iter", 500))
        model.coef_ = np.asarray(payload["weights"], dtype=np.float64)
        model.intercept_ = float(payload["bias"])
        model.final_loss_ = float(payload.get("final_loss", np.nan))
        model.n_iter_ = int(payload.get("iterations", 0))
        model.n_features_in_ = model.coef_.size
        model.feature_names_ = tuple(feature_schema)
        model.classes_ = np.array([0, 1])
        if len(model.feature_names_) != model.coef_.size:
            raise ValueError("feature_schema length differs from weight length")
        return model


# public aliases mirroring the domain vocabulary
ProxyModel = ProxyLogisticRegression


def train_proxy(features, labels, lam: float = 1e-3, tolerance: float = 1e-8, max_iters: int = 500,
                feature_names: Optional[Sequence[str]] = None) -> ProxyLogisticRegression:
    if isinstance(features, FeatureMatrix):
        feature_names = features.names
        features = features.values
    return ProxyLogisticRegression(lam=lam, tol=tolerance, max_iter=max_iters).fit(features, labels, feature_names)


def predict_intent(model: ProxyLogisticRegression, x):
    """Predicted intent; a float for a single row, an array otherwise."""
    p = model.predict_proba(x)[:, 1]
    single = np.ndim(getattr(x, "values", x)) == 1
    return float(p[0]) if single else p


@dataclass(frozen=True)
class ThresholdPair:
    tau_boost: float
    tau_demote: float
    achieved_pos_precision: float
    achieved_neg_precision: float
    n_calibration: int
    n_boost: int = 0
    n_demote: int = 0

    def __post_init__(self):
        if not self.tau_demote < self.tau_boost:
            raise ValueError(f"tau_demote ({self.tau_demote}) must be below tau_boost ({self.tau_boost})")

    def to_dict(self) -> dict:
        return {
            "tau_boost": self.tau_boost,
            "tau_demote": self.tau_demote,
            "achieved_pos_precision": self.achieved_pos_precision,
            "achieved_neg_precision": self.achieved_neg_precision,
            "n_calibration": self.n_calibration,
            "n_boost": self.n_boost,
            "n_demote": self.n_demote,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdPair":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class CalibrationError(ValueError):
    pass


def calibrate_thresholds(scores, labels, pos_precision_target: float = 0.80,
                         neg_precision_target: float = 0.60) -> ThresholdPair:
    """Precision-targeted boost and demote thresholds.

    For each observed score ``s`` the boost rule ``p > tau`` with ``tau`` the
    largest float below ``s`` selects exactly ``{p >= s}``; the smallest such
    ``s`` meeting the positive-precision target gives ``tau_boost``. The demote
    threshold mirrors this with ``{p <= s}``, negative precision and the
    largest qualifying ``s``.
    """
    for t in (pos_precision_target, neg_precision_target):
        if not 0 < t < 1:
            raise ValueError("precision targets must lie in (0, 1)")
    s = np.asarray(scores, dtype=float)
    y = check_binary_labels(labels, n=s.size)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    uniq, first = np.unique(s_sorted, return_index=True)
    last = np.append(first[1:], s.size)  # exclusive end of each tie block
    n = s.size
    pos_suffix = np.concatenate([np.cumsum(y_sorted[::-1])[::-1], [0]])
    neg_prefix = np.concatenate([[0], np.cumsum(1 - y_sorted)])

    # {p >= u_k}: rows first[k]..n
    sel_up = n - first
    prec_up = pos_suffix[first] / sel_up
    ok_up = np.nonzero(prec_up >= pos_precision_target)[0]
    if ok_up.size == 0:
        raise CalibrationError(f"target unreachable: no threshold reaches positive precision {pos_precision_target}")
    kb = ok_up[0]
    # {p <= u_k}: rows 0..last[k]
    sel_dn = last
    prec_dn = neg_prefix[last] / sel_dn
    ok_dn = np.nonzero(prec_dn >= neg_precision_target)[0]
    if ok_dn.size == 0:
        raise CalibrationError(f"target unreachable: no threshold reaches negative precision {neg_precision_target}")
    kd = ok_dn[-1]
    tau_b = float(np.nextafter(uniq[kb], -np.inf))
    tau_d = float(np.nextafter(uniq[kd], np.inf))
    if not tau_d < tau_b:
        raise CalibrationError(f"crossed thresholds: tau_demote {tau_d:.6g} >= tau_boost {tau_b:.6g}; "
                               "target unreachable without overlap")
    return ThresholdPair(
        tau_boost=tau_b,
        tau_demote=tau_d,
        achieved_pos_precision=float(prec_up[kb]),
        achieved_neg_precision=float(prec_dn[kd]),
        n_calibration=int(n),
        n_boost=int(sel_up[kb]),
        n_demote=int(sel_dn[kd]),
    )


def realized_precisions(scores, labels, thresholds: ThresholdPair) -> tuple[float, float]:
    """Positive precision above ``tau_boost`` and negative precision below ``tau_demote``."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    up = s > thresholds.tau_boost
    dn = s < thresholds.tau_demote
    pos = float(y[up].mean()) if up.any() else float("nan")
    neg = float(1 - y[dn].mean()) if dn.any() else float("nan")
    return pos, neg


class BehaviorModel:
    """Auxiliary like/skip predictors that feed the proxy's P group."""

    def __init__(self, like: ProxyLogisticRegression, skip: ProxyLogisticRegression):
        self.like = like
        self.skip = skip

    @classmethod
    def fit(cls, inputs: FeatureMatrix, like, skip, lam: float = 1e-3) -> "BehaviorModel":
        like = np.minimum(np.asarray(like), 1)
        skip = np.minimum(np.asarray(skip), 1)
        return cls(train_proxy(inputs, like, lam=lam), train_proxy(inputs, skip, lam=lam))

    def predict(self, inputs: FeatureMatrix) -> dict:
        return {
            "p_like": self.like.predict_proba(inputs)[:, 1],
            "p_skip": self.skip.predict_proba(inputs)[:, 1],
        }

    def to_payload(self) -> dict:
        return {
            "feature_schema": list(self.like.feature_names_),
            "like": self.like.to_payload(),
            "skip": self.skip.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "BehaviorModel":
        schema = payload["feature_schema"]
        return cls(ProxyLogisticRegression.from_payload(payload["like"], schema),
                   ProxyLogisticRegression.from_payload(payload["skip"], schema))
