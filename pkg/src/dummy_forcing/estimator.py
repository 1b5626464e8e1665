"""scikit-learn flavored front end for the head classifier.

Wraps the greedy assignment solver as a clustering-style estimator so head
scores can flow through pipelines and grid searches: ``fit`` takes the
(n_heads, 3) region-score matrix and exposes ``labels_`` plus the retained
attention mass as ``objective_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.exceptions import NotFittedError

from .head_programming import HeadClass, greedy_classify

_LABEL_CODES = {HeadClass.SINK: 0, HeadClass.NEIGHBOR: 1, HeadClass.DUMMY: 2}


def check_score_matrix(X) -> np.ndarray:
    """Validate an (n_heads, 3) nonnegative finite score matrix."""
    a = np.asarray(X, dtype=float)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected shape (n_heads, 3), got {a.shape}")
    if a.shape[0] < 1:
        raise ValueError("need at least one head")
    if not np.isfinite(a).all():
        raise ValueError("scores must be finite")
    if (a < 0).any():
        raise ValueError("scores must be nonnegative")
    return a


class HeadClassifier(ClusterMixin, BaseEstimator):
    """Assign each attention head to sink (0), neighbor (1), or dummy (2).

    Parameters
    ----------
    n_dummy : int or None
        Exact number of dummy heads. Mutually exclusive with dummy_fraction.
    dummy_fraction : float or None
        Dummy budget as a fraction of heads, rounded down.
    """

    def __init__(self, n_dummy: int | None = None, dummy_fraction: float | None = None):
        self.n_dummy = n_dummy
        self.dummy_fraction = dummy_fraction

    def _budget(self, n_heads: int) -> int:
        if (self.n_dummy is None) == (self.dummy_fraction is None):
            raise ValueError("set exactly one of n_dummy and dummy_fraction")
        if self.n_dummy is not None:
            return int(self.n_dummy)
        return int(n_heads * self.dummy_fraction)

    def fit(self, X, y=None):
        a = check_score_matrix(X)
        assignment, objective = greedy_classify(a, self._budget(a.shape[0]))
        self.assignment_ = assignment
        self.objective_ = objective
        self.labels_ = np.array([_LABEL_CODES[c] for c in assignment.classes])
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        """Labels for a new score matrix under the same dummy budget."""
        if not hasattr(self, "labels_"):
            raise NotFittedError("call fit before predict")
        a = check_score_matrix(X)
        assignment, _ = greedy_classify(a, self._budget(a.shape[0]))
        return np.array([_LABEL_CODES[c] for c in assignment.classes])
