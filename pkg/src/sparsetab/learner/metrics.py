"""Binary classification metrics and the logistic loss derivatives."""

from __future__ import annotations

import numpy as np

from ..errors import DataError

HESS_FLOOR = 1e-16
PROB_CLIP = 1e-12


def sigmoid(s):
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_grad_hess(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivative of the log loss with respect to the log-odds."""
    p = sigmoid(scores)
    y = np.asarray(labels, dtype=np.float64)
    return p - y, np.maximum(p * (1.0 - p), HESS_FLOOR)


def logloss(scores, labels) -> float:
    """Mean log loss of log-odds ``scores``."""
    p = np.clip(sigmoid(scores), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64)
    if len(y) == 0:
        return float("nan")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def average_ranks(x) -> np.ndarray:
    """1-based ranks, ties sharing their mean rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    _, inv, counts = np.unique(x[order], return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    ranks = np.empty(len(x), np.float64)
    ranks[order] = (ends - (counts - 1) / 2.0)[inv]
    return ranks


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties counted half."""
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC is undefined when only one class is present")
    r = average_ranks(np.asarray(scores, dtype=np.float64))
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.0) -> float:
    y = np.asarray(labels).astype(bool)
    return float(np.mean((np.asarray(scores) > threshold) == y))
