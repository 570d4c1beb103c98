"""Ranking metrics (AUC, average precision), DCI disentanglement and
multi-seed aggregation.

AUC uses the Mann-Whitney rank statistic with midranks for ties (O(n log n)).
Average precision ranks scores descending with ties broken by stable input
order. DCI follows the importance-entropy formulation: per-factor importance
vectors come from one-vs-rest L1-regularized logistic classifiers fit by
proximal gradient descent (no external solver, fully deterministic).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from adra.errors import MetricError


@dataclass
class ScoredTestSet:
    scores: np.ndarray
    labels: np.ndarray  # 0 = nominal, 1 = anomalous

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise MetricError(
                f"scores {self.scores.shape} and labels {self.labels.shape} "
                f"must be equal-length vectors")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def auc(scored: ScoredTestSet) -> float:
    """P(random anomalous score > random nominal score), ties counted 1/2."""
    labels = scored.labels
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise MetricError("AUC undefined: both label values must be present")
    ranks = _midranks(scored.scores)
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def average_precision(scored: ScoredTestSet) -> float:
    """Area under the precision-recall steps with anomalies as positives."""
    labels = scored.labels
    pos = int((labels == 1).sum())
    if pos == 0:
        raise MetricError("average precision undefined without positives")
    if len(np.unique(scored.scores)) < len(scored.scores):
        warnings.warn("tied scores: ranking falls back to stable input order",
                      RuntimeWarning, stacklevel=2)
    order = np.argsort(-scored.scores, kind="mergesort")
    hits = 0
    total = 0.0
    for k, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / k
    return total / pos


# ---------------------------------------------------------------------------
# DCI disentanglement
# ---------------------------------------------------------------------------

L1_WEIGHT = 1e-2


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def l1_logistic(X: np.ndarray, y: np.ndarray, lam: float = L1_WEIGHT,
                iters: int = 600) -> np.ndarray:
    """Proximal-gradient L1 logistic regression; returns the weight vector
    (bias excluded). Deterministic: fixed step from a spectral-norm bound."""
    n, d = X.shape
    Xb = np.concatenate([X, np.ones((n, 1))], axis=1)
    # power iteration for ||Xb||_2 (deterministic start)
    v = np.ones(d + 1) / np.sqrt(d + 1)
    for _ in range(60):
        v = Xb.T @ (Xb @ v)
        v /= max(np.linalg.norm(v), 1e-12)
    lipschitz = max((np.linalg.norm(Xb @ v) ** 2) / n / 4.0, 1e-12)
    step = 1.0 / lipschitz
    w = np.zeros(d + 1)
    yf = y.astype(np.float64)
    for _ in range(iters):
        p = _sigmoid(Xb @ w)
        grad = Xb.T @ (p - yf) / n
        w -= step * grad
        # soft threshold, bias unpenalized
        w[:d] = np.sign(w[:d]) * np.maximum(np.abs(w[:d]) - step * lam, 0.0)
    return w[:d]


def importance_matrix(representations: np.ndarray,
                      factors: np.ndarray) -> np.ndarray:
    """d x F matrix: mean |coefficient| of one-vs-rest classifiers per factor,
    fit on standardized representation dimensions."""
    X = np.asarray(representations, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    X = (X - mu) / np.maximum(sd, 1e-8)
    n, d = X.shape
    F = factors.shape[1]
    R = np.zeros((d, F))
    for f in range(F):
        codes = factors[:, f]
        importances = []
        for value in np.unique(codes):
            y = (codes == value).astype(np.float64)
            if y.min() == y.max():
                continue
            importances.append(np.abs(l1_logistic(X, y)))
        if importances:
            R[:, f] = np.mean(importances, axis=0)
    return R


def disentanglement_from_importances(R: np.ndarray) -> float:
    """Importance-weighted (1 - entropy) over the row-normalized d x F matrix."""
    R = np.asarray(R, dtype=np.float64)
    if (R < 0).any():
        raise MetricError("importances must be nonnegative")
    row_sums = R.sum(axis=1)
    total = row_sums.sum()
    if total == 0.0:
        warnings.warn("degenerate all-zero importances; disentanglement is 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    F = R.shape[1]
    weights = row_sums / total
    score = 0.0
    for i in range(R.shape[0]):
        if row_sums[i] == 0.0:
            continue
        p = R[i] / row_sums[i]
        nz = p[p > 0]
        entropy = -(nz * (np.log(nz) / np.log(F))).sum()
        score += weights[i] * (1.0 - entropy)
    return float(score)


def dci_disentanglement(representations: np.ndarray,
                        factors: np.ndarray) -> float:
    """Overall D score in [0, 1]; 1 means each used dimension encodes
    exactly one factor."""
    representations = np.asarray(representations)
    factors = np.asarray(factors)
    n, d = representations.shape
    F = factors.shape[1]
    if not (n > d >= 1 and F >= 2):
        raise MetricError(
            f"DCI requires n > d >= 1 and F >= 2; got n={n}, d={d}, F={F}")
    return disentanglement_from_importances(
        importance_matrix(representations, factors))


def aggregate(values) -> dict:
    """Mean and population std over per-seed metric values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 1:
        raise MetricError("aggregate requires at least one value")
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}
