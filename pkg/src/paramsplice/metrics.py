"""Evaluation metrics: accuracy, macro F1, rank-based AUC, leave-one-out
NDCG@k / HR@k, and a median-of-repetitions inference cost ratio."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np


class MetricUndefinedError(ValueError):
    """The metric has no defined value for these inputs (e.g. AUC with a
    single-class label set)."""


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC is undefined without both classes present")
    ranks = _average_ranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Accuracy (argmax), macro F1 over all score columns, and AUC.

    Binary problems use the class-1 score column; multiclass AUC is the
    macro average of one-vs-rest AUCs over classes present in the labels.
    Raises MetricUndefinedError instead of silently reporting 0.5 when
    only one class occurs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels) or len(labels) == 0:
        raise ValueError("scores must be (N, C) aligned with non-empty labels")
    n_classes = scores.shape[1]
    predicted = scores.argmax(axis=1)
    accuracy = float((predicted == labels).mean())

    f1_per_class = []
    for c in range(n_classes):
        tp = int(((predicted == c) & (labels == c)).sum())
        fp = int(((predicted == c) & (labels != c)).sum())
        fn = int(((predicted != c) & (labels == c)).sum())
        f1_per_class.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    f1 = float(np.mean(f1_per_class))

    present = np.unique(labels)
    if len(present) < 2:
        raise MetricUndefinedError("AUC is undefined for a single-class label set")
    if n_classes == 2:
        auc = _binary_auc(scores[:, 1], labels == 1)
    else:
        auc = float(np.mean([_binary_auc(scores[:, c], labels == c) for c in present]))
    return {"accuracy": accuracy, "f1": f1, "auc": auc}


def ranking_metrics(ranked_lists: np.ndarray, held_out_items: np.ndarray,
                    k: int) -> dict[str, float]:
    """Leave-one-out HR@k and NDCG@k.

    ``ranked_lists[u]`` holds candidate item ids sorted by descending score;
    ``held_out_items[u]`` is the user's single test item. NDCG gain is
    1 / log2(rank + 1) with rank starting at 1; a miss outside the list or
    below rank k scores 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked_lists = np.asarray(ranked_lists)
    held_out_items = np.asarray(held_out_items)
    if len(ranked_lists) != len(held_out_items) or len(held_out_items) == 0:
        raise ValueError("need one ranked list per held-out item")
    hits, gains = [], []
    for row, target in zip(ranked_lists, held_out_items):
        positions = np.nonzero(row == target)[0]
        rank = int(positions[0]) + 1 if len(positions) else None
        hit = rank is not None and rank <= k
        hits.append(1.0 if hit else 0.0)
        gains.append(1.0 / np.log2(rank + 1.0) if hit else 0.0)
    return {f"ndcg@{k}": float(np.mean(gains)), f"hr@{k}": float(np.mean(hits))}


def rank_by_score(scores: np.ndarray) -> np.ndarray:
    """Column indices sorted by descending score per row (stable, so
    earlier candidates win exact ties)."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="mergesort")


@dataclass(frozen=True)
class CostMeasurement:
    ratio: float          # rounded to one decimal
    raw_ratio: float
    method_median_s: float
    base_median_s: float


def measure_cost_ratio(method_fn: Callable[[], object], base_fn: Callable[[], object],
                       repetitions: int = 5) -> CostMeasurement:
    """Median method time over median base time, both timed on identical
    work, after one warmup call each. Ratio is rounded to one decimal."""
    if repetitions < 5:
        raise ValueError("cost measurement needs at least 5 repetitions")
    method_fn()
    base_fn()
    method_times, base_times = [], []
    for _ in range(repetitions):
        start = time.perf_counter()
        method_fn()
        method_times.append(time.perf_counter() - start)
        start = time.perf_counter()
        base_fn()
        base_times.append(time.perf_counter() - start)
    base_median = float(np.median(base_times))
    method_median = float(np.median(method_times))
    if base_median <= 0.0:
        raise ArithmeticError("base timer measured zero time")
    raw = method_median / base_median
    return CostMeasurement(round(raw, 1), raw, method_median, base_median)
