"""Outlier-ranking metrics: AUC-ROC, average precision and SIREOS.

Scores follow the "higher is more anomalous" convention throughout. The
ranking metrics return ``None`` when the labels do not contain both classes.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata

from .errors import NumericError, ShapeError


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise NumericError("scores must be finite")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def auc_roc(scores, labels) -> float | None:
    """Mann-Whitney estimate of P(pos > neg) + P(tie) / 2 using midranks."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float | None:
    """Non-interpolated AP: mean precision at each positive's rank.

    Tied scores form one threshold: every positive in a tie group gets the
    precision at the end of the group, so the value does not depend on the
    input order. With distinct scores this is the plain rank definition.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s_sorted, hits = s[order], y[order]
    tp = np.cumsum(hits)
    # last index of each tie group
    ends = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
    tp_end = tp[ends]
    new_pos = np.diff(np.concatenate(([0], tp_end)))
    precision = tp_end / (ends + 1)
    return float(np.dot(new_pos, precision) / n_pos)


def sireos_similarities(features, k: int = 10, percentile: float = 1.0) -> np.ndarray:
    """Mean Gaussian-kernel similarity of each point to its k nearest neighbours.

    The bandwidth is the ``percentile``-th percentile of the non-zero pairwise
    distances. This part does not depend on the scores, so callers that
    evaluate many score vectors on the same features can compute it once.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("features must be a 2-d matrix")
    n = x.shape[0]
    if n < 2:
        raise ShapeError("SIREOS needs at least two points")
    k = min(k, n - 1)
    if k < 1:
        raise ValueError("k must be >= 1")
    condensed = pdist(x)
    nonzero = condensed[condensed > 0]
    if nonzero.size == 0:
        return np.ones(n)
    t = np.percentile(nonzero, percentile)
    dist = squareform(condensed)
    np.fill_diagonal(dist, np.inf)
    nearest = np.partition(dist, k - 1, axis=1)[:, :k]
    return np.exp(-(nearest**2) / (2.0 * t * t)).mean(axis=1)


def sireos_index(scores, similarities) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    sim = np.asarray(similarities, dtype=np.float64).ravel()
    if s.shape != sim.shape:
        raise ShapeError("scores and similarities must be aligned")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise NumericError("SIREOS needs finite, non-negative scores")
    total = s.sum()
    if total <= 0:
        raise NumericError("SIREOS needs at least one positive score")
    return float(np.dot(s / total, sim))


def sireos(scores, features, k: int = 10, percentile: float = 1.0) -> float:
    """Label-free SIREOS index; lower values mean better separated outliers."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != np.asarray(scores).size:
        raise ShapeError("scores and features must have the same number of rows")
    return sireos_index(scores, sireos_similarities(x, k, percentile))
