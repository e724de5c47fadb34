"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .metric import Metric, Point


def check_hamming_fit(X) -> np.ndarray:
    X = check_array(X, dtype=None, ensure_min_samples=0, ensure_all_finite=True)
    if X.size and not np.isin(X, (0, 1)).all():
        raise ValueError("Hamming estimators expect 0/1 coordinates")
    return X.astype(np.uint8, copy=False)


def check_lp_fit(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_min_samples=0)


def check_query(metric: Metric, q) -> np.ndarray:
    if isinstance(q, Point):
        if q.p != metric.p:
            raise ValueError(f"query mode {q.metric.mode} does not match {metric.mode}")
        q = q.coords
    return metric.check(q, ndim=1)


def check_queries(metric: Metric, X) -> np.ndarray:
    return metric.check(np.atleast_2d(np.asarray(X)))


def answer_code(ans) -> int:
    """Integer encoding for ``predict`` arrays: bottom is -1, TIMEOUT is -2."""
    from .budget import TIMEOUT

    if ans is None:
        return -1
    if ans is TIMEOUT:
        return -2
    return int(ans)
