"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.utils.validation import check_array


class SchemaMismatchError(ValueError):
    pass


def check_binary_labels(y, n: int | None = None, require_both: bool = True) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if n is not None and y.size != n:
        raise ValueError(f"expected {n} labels, got {y.size}")
    if y.dtype == bool:
        y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    y = y.astype(np.int64)
    if require_both and (y.min() == y.max()):
        raise ValueError("single-class labels: both classes must be present")
    return y


def check_feature_input(X, schema: Sequence[str]) -> np.ndarray:
    """Return a 2-D float array ordered per ``schema``.

    ``X`` may be an array (columns assumed already in schema order) or an object
    with ``names`` and ``values`` (a FeatureVector/FeatureMatrix), which is
    reordered by name and rejected if any schema name is missing.
    """
    schema = tuple(schema)
    names = getattr(X, "names", None)
    if names is not None and hasattr(X, "values"):
        names = tuple(names)
        values = np.asarray(X.values, dtype=np.float64)
        if set(names) != set(schema) or len(names) != len(schema):
            missing = sorted(set(schema) - set(names))
            extra = sorted(set(names) - set(schema))
            raise SchemaMismatchError(f"feature schema mismatch: missing={missing} extra={extra}")
        if names != schema:
            pos = {n: i for i, n in enumerate(names)}
            perm = [pos[n] for n in schema]
            values = values[..., perm]
        X = values
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] != len(schema):
        raise SchemaMismatchError(
            f"feature schema mismatch: model expects {len(schema)} features, got {X.shape[1]}"
        )
    return X
