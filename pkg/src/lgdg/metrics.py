"""Average precision, three-criterion mAP, and seed aggregation.

AP is the exact area under the precision-recall staircase (no 11-point or
101-point interpolation): rank by score descending with ties broken by
frame id ascending, then sum (R_k - R_{k-1}) * P_k over the ranks that hold
positives. Reports multiply by 100 and keep two decimals; everything here
stays in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CRITERIA = ("c1", "c2", "c3")


class UndefinedMetricError(ValueError):
    """AP is undefined without at least one positive and one negative."""

    def __init__(self, message: str, criterion: int | None = None):
        super().__init__(message)
        self.criterion = criterion


@dataclass
class ResultAggregate:
    """Mean and sample (n-1) standard deviation of per-seed values."""

    values: tuple[float, ...]
    mean: float
    std: float | None

    def formatted(self) -> str:
        """Paper-style cell: values scaled by 100, two decimals."""
        if self.std is None:
            return f"{100.0 * self.mean:.2f}"
        return f"{100.0 * self.mean:.2f} ± {100.0 * self.std:.2f}"


def average_precision(scores: Sequence[float], labels: Sequence[int],
                      frame_ids: Sequence[int] | None = None,
                      n_positive_total: int | None = None) -> float:
    """Exact-staircase AP of one criterion.

    `n_positive_total` overrides the recall denominator; the detector's box
    mAP uses it to count ground-truth objects that were never retrieved.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if frame_ids is None:
        frame_ids = np.arange(len(scores))
    else:
        frame_ids = np.asarray(frame_ids)

    n_pos = int(labels.sum())
    total_pos = n_pos if n_positive_total is None else int(n_positive_total)
    if total_pos == 0:
        raise UndefinedMetricError("no positive examples: AP undefined")
    if n_positive_total is None and n_pos == len(labels):
        raise UndefinedMetricError("no negative examples: AP undefined")

    # descending score, ascending frame id on ties
    order = np.lexsort((frame_ids, -scores))
    ranked = labels[order]

    ap = 0.0
    tp = 0
    prev_recall = 0.0
    for k, is_pos in enumerate(ranked, start=1):
        if is_pos:
            tp += 1
            recall = tp / total_pos
            precision = tp / k
            ap += (recall - prev_recall) * precision
            prev_recall = recall
    return ap


def map3(scores: np.ndarray, labels: np.ndarray,
         frame_ids: Sequence[int] | None = None) -> tuple[float, tuple[float, float, float]]:
    """Mean AP over the three criteria; returns (mAP, per-criterion APs)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] != 3 or scores.shape != labels.shape:
        raise ValueError(f"expected (n, 3) scores/labels, got {scores.shape} and {labels.shape}")
    aps = []
    for c in range(3):
        try:
            aps.append(average_precision(scores[:, c], labels[:, c], frame_ids))
        except UndefinedMetricError as e:
            raise UndefinedMetricError(f"criterion {CRITERIA[c]}: {e}", criterion=c) from None
    return float(np.mean(aps)), tuple(aps)


def aggregate(seed_results: Sequence[float]) -> ResultAggregate:
    """Mean +/- sample std over per-seed values (std absent for n = 1)."""
    if len(seed_results) == 0:
        raise ValueError("aggregate of zero results")
    values = tuple(float(v) for v in seed_results)
    if len(values) == 1:
        return ResultAggregate(values, values[0], None)
    if all(v == values[0] for v in values):
        return ResultAggregate(values, values[0], 0.0)
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return ResultAggregate(values, mean, math.sqrt(var))
