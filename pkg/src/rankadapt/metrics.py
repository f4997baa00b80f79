"""Evaluation metrics: ordinal MAE/accuracy and rank correlations.

Correlations are population-form Pearson; the rank correlation is Pearson
over average-tie ranks, which is exact in the presence of ties. Metrics on
degenerate inputs (fewer than two items, zero variance) raise instead of
returning a misleading number; report assembly maps that to null fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class UndefinedCorrelationError(ValueError):
    """Correlation requested on fewer than two items or a constant vector."""


def _as_vector(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def rank_average_ties(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = _as_vector(x, "x")
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise UndefinedCorrelationError("correlation needs at least two items")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined on a constant vector")
    return float((xc * yc).sum() / (sx * sy))


def srcc(x, y) -> float:
    """Rank correlation: Pearson over average-tie ranks."""
    return plcc(rank_average_ties(x), rank_average_ties(y))


def mae_and_accuracy(pred, bins, num_bins: int | None = None) -> tuple[float, float]:
    """Ordinal MAE and exact accuracy after rounding predictions to bins.

    Predictions are rounded to the nearest integer and clamped into
    [0, num_bins - 1]; num_bins defaults to max(bins) + 1.
    """
    pred = _as_vector(pred, "pred")
    bins = np.asarray(bins)
    if bins.shape != pred.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {bins.shape}")
    if len(pred) == 0:
        raise ValueError("no items to score")
    bins = bins.astype(np.int64)
    k = int(bins.max()) + 1 if num_bins is None else int(num_bins)
    decoded = np.clip(np.rint(pred), 0, k - 1).astype(np.int64)
    mae = float(np.abs(decoded - bins).mean())
    accuracy = float((decoded == bins).mean())
    return mae, accuracy


@dataclass
class GroupMetrics:
    """Metrics for one item group; None where a metric is undefined."""

    n_items: int
    mae: float | None = None
    accuracy: float | None = None
    plcc: float | None = None
    srcc: float | None = None

    def as_dict(self):
        return {"n_items": self.n_items, "mae": self.mae, "accuracy": self.accuracy,
                "plcc": self.plcc, "srcc": self.srcc}


@dataclass
class EvalReport:
    """Per-query metrics plus a pooled row over every scored item."""

    per_query: dict
    pooled: GroupMetrics

    def as_dict(self):
        return {"per_query": {str(q): m.as_dict() for q, m in self.per_query.items()},
                "pooled": self.pooled.as_dict()}

    def to_text(self) -> str:
        """Canonical JSON rendering; byte-stable for identical inputs."""
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


def _group_metrics(pred, y, bins, num_bins) -> GroupMetrics:
    m = GroupMetrics(n_items=len(pred))
    if bins is not None:
        m.mae, m.accuracy = mae_and_accuracy(pred, bins, num_bins)
    try:
        m.plcc = plcc(pred, y)
        m.srcc = srcc(pred, y)
    except UndefinedCorrelationError:
        pass
    return m


def build_report(query_ids, pred, y, bins=None, num_bins: int | None = None) -> EvalReport:
    """Group scored items by query and compute per-query plus pooled metrics.

    bins is either None (no ordinal labels) or a per-item array where
    negative entries mark items without a label.
    """
    query_ids = np.asarray(query_ids)
    pred = _as_vector(pred, "pred")
    y = _as_vector(y, "y")
    if not (len(query_ids) == len(pred) == len(y)):
        raise ValueError("query_ids, pred, and y must have equal lengths")
    if len(pred) == 0:
        raise ValueError("cannot build a report over zero items")
    bins_arr = None if bins is None else np.asarray(bins, dtype=np.int64)

    def metrics_for(mask):
        b = None
        if bins_arr is not None and np.all(bins_arr[mask] >= 0):
            b = bins_arr[mask]
        return _group_metrics(pred[mask], y[mask], b, num_bins)

    per_query = {}
    for q in sorted(set(int(q) for q in query_ids)):
        per_query[q] = metrics_for(query_ids == q)
    return EvalReport(per_query=per_query, pooled=metrics_for(np.ones(len(pred), dtype=bool)))
