"""Evaluation metrics and cross-dataset aggregation.

All scores follow one sign convention: higher is better (RMSE is negated).
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes; got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(predicted, labels) -> float:
    predicted, labels = np.asarray(predicted).ravel(), np.asarray(labels).ravel()
    return float(np.mean(predicted == labels))


def nrmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if predictions.size == 0:
        raise ValueError("nrmse needs at least one prediction")
    return -float(np.sqrt(np.mean((predictions - targets) ** 2)))


def task_metric(task: str, outputs, labels) -> float:
    """The headline score for a task: AUC (binary), ACC (multiclass), nRMSE (regression)."""
    if task == "binary":
        return auc(outputs, labels)
    if task == "multiclass":
        return accuracy(np.argmax(outputs, axis=1), labels)
    return nrmse(outputs, labels)


METRIC_NAMES = {"binary": "auc", "multiclass": "accuracy", "regression": "nrmse"}


def normalized_scores(scores) -> np.ndarray:
    """Average min-max normalised score per model.

    ``scores`` is models x datasets.  Each dataset column is rescaled to [0, 1]
    across models; a column with no spread contributes 0 to every model.
    """
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError(f"need a models x datasets matrix with at least 2 models, got shape {S.shape}")
    lo, hi = S.min(axis=0), S.max(axis=0)
    span = hi - lo
    flat = span <= 0
    if flat.any():
        logger.warning("%d dataset(s) have identical scores across models; they contribute 0", int(flat.sum()))
    norm = np.where(flat, 0.0, (S - lo) / np.where(flat, 1.0, span))
    return norm.mean(axis=1)


def ranks(scores) -> tuple[np.ndarray, np.ndarray]:
    """Per-model (mean rank, std of rank) over datasets; rank 1 is best, ties averaged."""
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError(f"need a models x datasets matrix with at least 2 models, got shape {S.shape}")
    R = rank_matrix(S)
    return R.mean(axis=1), R.std(axis=1)


def rank_matrix(scores) -> np.ndarray:
    S = np.asarray(scores, dtype=np.float64)
    return np.column_stack([rankdata(-S[:, j], method="average") for j in range(S.shape[1])])
