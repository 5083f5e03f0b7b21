"""Nonresponse correction with covariate-balancing propensity scores."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .gbt import sigmoid
from .validation import check_binary_labels

DEFAULT_TRIM = (0.1, 0.9)
# keeps fitted propensities strictly inside (0, 1)
_PROB_EPS = 1e-12


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual max-norm {residual:.3e})")
        self.residual = residual


def _moment(Z: np.ndarray, pi: np.ndarray, A: np.ndarray) -> np.ndarray:
    return A.T @ (Z - pi) / Z.size


def _objective(Z, eta):
    # negative mean Bernoulli log-likelihood; its gradient is -moment
    return float(np.mean(np.logaddexp(0.0, eta) - Z * eta))


class CBPS(BaseEstimator):
    """Just-identified covariate-balancing propensity score.

    Solves ``(1/n) sum_i (Z_i - pi(X_i)) [1, X_i] = 0`` with a logistic
    ``pi`` by damped Newton iteration on standardized covariates.

    Parameters
    ----------
    tol : float
        Convergence tolerance on the max-norm of the moment residual.
    max_iter : int
        Newton iteration cap.

    Attributes
    ----------
    coef_ : ndarray of shape (p,)
        Coefficients on the original covariate scale.
    intercept_ : float
    standardized_coef_ : ndarray of shape (p,)
    residual_ : float
        Max-norm of the moment condition at the solution.
    n_iter_ : int
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, responded, feature_names: Optional[Sequence[str]] = None):
        X = check_array(X, dtype=np.float64)
        Z = check_binary_labels(responded, n=X.shape[0]).astype(np.float64)
        n, p = X.shape
        if n <= p:
            raise ValueError(f"need more rows than covariates (n={n}, p={p})")
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        A = np.column_stack([np.ones(n), (X - mean) / scale])
        prev = Z.mean()
        theta = np.zeros(p + 1)
        theta[0] = np.log(prev / (1 - prev))
        eta = A @ theta
        obj = _objective(Z, eta)
        resid = np.inf
        it = 0
        for it in range(1, self.max_iter + 1):
            pi = sigmoid(eta)
            m = _moment(Z, pi, A)
            resid = float(np.abs(m).max())
            if resid <= self.tol:
                break
            H = (A * (pi * (1 - pi))[:, None]).T @ A / n
            try:
                step = np.linalg.solve(H, m)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, m, rcond=None)[0]
            t = 1.0
            while True:
                cand = theta + t * step
                cand_eta = A @ cand
                cand_obj = _objective(Z, cand_eta)
                if cand_obj <= obj + 1e-4 * t * float(-m @ step) or t < 1e-10:
                    break
                t *= 0.5
            theta, eta, obj = cand, cand_eta, cand_obj
        else:
            pi = sigmoid(eta)
            resid = float(np.abs(_moment(Z, pi, A)).max())
            if resid > self.tol:
                raise ConvergenceError(f"CBPS did not converge in {self.max_iter} iterations", resid)
        assert resid <= self.tol
        self.standardized_coef_ = theta[1:].copy()
        self.coef_ = theta[1:] / scale
        self.intercept_ = float(theta[0] - np.sum(theta[1:] * mean / scale))
        self.residual_ = resid
        self.n_iter_ = it
        self.n_features_in_ = p
        self.feature_names_ = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(p))
        self._mean, self._scale = mean, scale
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} covariates, got {X.shape[1]}")
        # evaluate on the standardized scale to match the fit exactly
        return self.standardized_coef_ @ ((X - self._mean) / self._scale).T + (
            self.intercept_ + np.sum(self.standardized_coef_ * self._mean / self._scale)
        )

    def predict_proba(self, X) -> np.ndarray:
        """Response propensities, clipped strictly inside (0, 1)."""
        return np.clip(sigmoid(self.decision_function(X)), _PROB_EPS, 1 - _PROB_EPS)

    def moment_residual(self, X, responded) -> float:
        X = check_array(X, dtype=np.float64)
        Z = np.asarray(responded, dtype=float)
        A = np.column_stack([np.ones(X.shape[0]), (X - self._mean) / self._scale])
        return float(np.abs(_moment(Z, sigmoid(self.decision_function(X)), A)).max())

    def to_payload(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "coefficients": [float(c) for c in self.coef_],
            "intercept": self.intercept_,
            "standardized_coefficients": [float(c) for c in self.standardized_coef_],
            "mean": [float(v) for v in self._mean],
            "scale": [float(v) for v in self._scale],
            "residual": self.residual_,
            "n_iter": self.n_iter_,
        }

    @classmethod
    def from_payload(cls, payload: dict, feature_schema: Sequence[str]) -> "CBPS":
        model = cls()
        model.coef_ = np.asarray(payload["coefficients"], dtype=float)
        model.intercept_ = float(payload["intercept"])
        model.standardized_coef_ = np.asarray(payload["standardized_coefficients"], dtype=float)
        model._mean = np.asarray(payload["mean"], dtype=float)
        model._scale = np.asarray(payload["scale"], dtype=float)
        model.residual_ = float(payload["residual"])
        model.n_iter_ = int(payload["n_iter"])
        model.n_features_in_ = model.coef_.size
        model.feature_names_ = tuple(feature_schema)
        return model


@dataclass(frozen=True)
class PropensityModel:
    """Fitted logistic response-propensity model on the original covariate scale."""

    coefficients: np.ndarray
    intercept: float
    feature_names: tuple[str, ...]
    estimator: CBPS

    def predict(self, X) -> np.ndarray:
        return self.estimator.predict_proba(X)


def fit_cbps(covariates, responded, feature_names: Optional[Sequence[str]] = None, *,
             tol: float = 1e-8, max_iter: int = 100) -> PropensityModel:
    est = CBPS(tol=tol, max_iter=max_iter).fit(covariates, responded, feature_names)
    return PropensityModel(est.coef_.copy(), est.intercept_, est.feature_names_, est)


@dataclass(frozen=True)
class WeightedSample:
    index: int
    covariates: np.ndarray
    responded: bool
    propensity: float
    weight: float
    trimmed: bool


@dataclass(frozen=True)
class WeightedFrame:
    """Columnar view of ``trim_and_weight`` output."""

    propensity: np.ndarray
    responded: np.ndarray
    weight: np.ndarray
    trimmed: np.ndarray
    bounds: tuple[float, float]

    @property
    def n_trimmed(self) -> int:
        return int(self.trimmed.sum())


def _check_bounds(bounds) -> tuple[float, float]:
    low, high = float(bounds[0]), float(bounds[1])
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"trimming bounds must satisfy 0 <= low < high <= 1, got {bounds}")
    return low, high


def weight_frame(propensities, responded, bounds=DEFAULT_TRIM) -> WeightedFrame:
    low, high = _check_bounds(bounds)
    p = np.asarray(propensities, dtype=float)
    z = np.asarray(responded).astype(bool)
    if p.shape != z.shape:
        raise ValueError("propensities and responded must have equal length")
    if ((p <= 0) | (p >= 1) | ~np.isfinite(p)).any():
        raise ValueError("propensities must lie strictly inside (0, 1)")
    trimmed = (p < low) | (p > high)
    w = np.where(z & ~trimmed, 1.0 / p, 0.0)
    return WeightedFrame(p, z, w, trimmed, (low, high))


def trim_and_weight(propensities, responded, bounds=DEFAULT_TRIM, covariates=None) -> list[WeightedSample]:
    """Inverse-propensity weights with propensity trimming.

    Rows outside ``[low, high]`` are trimmed (weight 0). Untrimmed responders
    get ``1/propensity``; nonresponders keep their propensity but weigh 0.
    """
    f = weight_frame(propensities, responded, bounds)
    X = None if covariates is None else np.asarray(covariates, dtype=float)
    out = []
    for i in range(f.propensity.size):
        row = np.zeros(0) if X is None else X[i].copy()
        row.setflags(write=False)
        out.append(WeightedSample(i, row, bool(f.responded[i]), float(f.propensity[i]),
                                  float(f.weight[i]), bool(f.trimmed[i])))
    return out


def compute_smd(values, group, weights=None) -> float:
    """Standardized mean difference, group 1 minus group 0.

    Means are weighted when ``weights`` is given; the pooled sd always uses the
    unweighted variances of the two groups, ``sqrt((s1^2 + s0^2) / 2)``.
    """
    x = np.asarray(values, dtype=float)
    g = np.asarray(group).astype(bool)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    w1, w0 = w[g], w[~g]
    if w1.sum() <= 0 or w0.sum() <= 0:
        raise ValueError("both groups must be non-empty after weighting")
    if g.sum() < 2 or (~g).sum() < 2:
        raise ValueError("each group needs at least two rows")
    pooled = np.sqrt((x[g].var(ddof=1) + x[~g].var(ddof=1)) / 2.0)
    if pooled == 0:
        raise ValueError("degenerate covariate: zero pooled standard deviation")
    m1 = np.sum(w1 * x[g]) / w1.sum()
    m0 = np.sum(w0 * x[~g]) / w0.sum()
    return float((m1 - m0) / pooled)


def balance_report(covariates, responded, frame: WeightedFrame, names: Sequence[str],
                   threshold: float = 0.1) -> dict:
    """Responders (IPW-weighted) against the retained target population.

    The comparison group is every untrimmed row, responders and nonresponders
    alike, so the weighted responder means should match the population they
    are meant to represent.
    """
    X = np.asarray(covariates, dtype=float)
    keep = ~frame.trimmed
    resp = frame.responded & keep
    # stack responders (group 1) against the kept population (group 0)
    rows = np.concatenate([np.nonzero(resp)[0], np.nonzero(keep)[0]])
    grp = np.concatenate([np.ones(resp.sum(), bool), np.zeros(keep.sum(), bool)])
    w = np.concatenate([frame.weight[resp], np.ones(keep.sum())])
    raw_rows = np.concatenate([np.nonzero(frame.responded)[0], np.arange(X.shape[0])])
    raw_grp = np.concatenate([np.ones(frame.responded.sum(), bool), np.zeros(X.shape[0], bool)])
    entries = []
    for j, name in enumerate(names):
        unweighted = compute_smd(X[raw_rows, j], raw_grp)
        weighted = compute_smd(X[rows, j], grp, w)
        entries.append({
            "covariate": name,
            "smd_unweighted": unweighted,
            "smd_weighted": weighted,
            "passed": bool(abs(weighted) < threshold),
        })
    return {
        "balance": entries,
        "trimming": {"n_trimmed": frame.n_trimmed, "bounds": list(frame.bounds)},
    }
