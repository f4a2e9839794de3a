"""Evaluation measures: AUC / F1 / Accuracy and RMSE / MAE."""

from __future__ import annotations

import numpy as np

__all__ = ["MetricError", "auc", "f1", "accuracy", "rmse", "mae", "evaluate"]


class MetricError(Exception):
    pass


def _as_arrays(labels, scores):
    labels = np.asarray(labels, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape:
        raise MetricError(f"length mismatch: {labels.shape} vs {scores.shape}")
    if labels.size == 0:
        raise MetricError("empty batch")
    return labels, scores


def auc(labels, scores) -> float:
    """Global AUC via the Mann-Whitney statistic (ties count 0.5)."""
    labels, scores = _as_arrays(labels, scores)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(labels.size)
    sorted_scores = scores[order]
    # average ranks within tie groups (1-based)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1(labels, scores, threshold: float = 0.5) -> float:
    labels, scores = _as_arrays(labels, scores)
    pred = scores >= threshold
    tp = float(np.sum(pred & (labels == 1)))
    fp = float(np.sum(pred & (labels == 0)))
    fn = float(np.sum(~pred & (labels == 1)))
    denom = 2.0 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def accuracy(labels, scores, threshold: float = 0.5) -> float:
    labels, scores = _as_arrays(labels, scores)
    return float(np.mean((scores >= threshold) == (labels == 1)))


def rmse(labels, scores) -> float:
    labels, scores = _as_arrays(labels, scores)
    return float(np.sqrt(np.mean((labels - scores) ** 2)))


def mae(labels, scores) -> float:
    labels, scores = _as_arrays(labels, scores)
    return float(np.mean(np.abs(labels - scores)))


def evaluate(labels, scores, metric: str) -> float:
    """Dispatch by metric name; used for reward and early-stop signals."""
    fns = {"auc": auc, "f1": f1, "accuracy": accuracy, "rmse": rmse, "mae": mae}
    if metric not in fns:
        raise MetricError(f"unknown metric {metric!r}")
    return fns[metric](labels, scores)


def higher_is_better(metric: str) -> bool:
    return metric in ("auc", "f1", "accuracy")
