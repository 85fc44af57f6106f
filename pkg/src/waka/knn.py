"""Discrete k-NN loss, utility, prediction and subset-restricted evaluation.

The classifier's loss at a query point is the fraction of its ``k`` nearest
training neighbors whose label differs from the query's label, so losses live
on the ``k + 1``-value grid ``{0, 1/k, ..., 1}`` and utility is ``1 - loss``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .neighbors import NeighborOrder, canonical_argsort, pairwise_to_query


@dataclass(frozen=True)
class LossSpec:
    """The loss grid for a given neighbor count ``k``."""

    k: int
    support: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        object.__setattr__(self, "support", np.arange(self.k + 1) / self.k)

    def bin_of(self, loss: float) -> int:
        """Index of ``loss`` on the grid; raises if it is not a grid value."""
        scaled = loss * self.k
        idx = int(round(scaled))
        if not 0 <= idx <= self.k or abs(scaled - idx) > 1e-9:
            raise ValueError(f"loss {loss} is not on the {self.k + 1}-value grid")
        return idx


def knn_loss(order: NeighborOrder, labels: np.ndarray, y: int, k: int) -> float:
    """Fraction of the ``k`` nearest neighbors in ``order`` not labeled ``y``."""
    if len(order) < k:
        raise ValueError(f"order has {len(order)} entries, need at least k={k}")
    top = order.ranked[:k]
    mismatches = int(np.sum(labels[top] != y))
    return mismatches / k


def knn_utility(order: NeighborOrder, labels: np.ndarray, y: int, k: int) -> float:
    return 1.0 - knn_loss(order, labels, y, k)


def knn_predict_confidence(
    order: NeighborOrder,
    labels: np.ndarray,
    y_query: int,
    k: int,
    threshold: float | None = None,
) -> tuple[int, float]:
    """Majority-vote prediction plus the vote share of the queried label.

    Vote ties go to the smaller label id. For binary problems an explicit
    decision ``threshold`` may replace the majority rule: predict class 1
    exactly when its vote share exceeds the threshold. The returned
    confidence is the fraction of the ``k`` nearest sharing ``y_query``,
    i.e. ``1 - knn_loss``.
    """
    if len(order) < k:
        raise ValueError(f"order has {len(order)} entries, need at least k={k}")
    top_labels = labels[order.ranked[:k]]
    counts = np.bincount(top_labels)
    if threshold is None:
        predicted = int(np.argmax(counts))  # argmax takes the smallest id on ties
    else:
        share_one = counts[1] / k if counts.shape[0] > 1 else 0.0
        predicted = 1 if share_one > threshold else 0
    confidence = float(np.sum(top_labels == y_query)) / k
    return predicted, confidence


def subset_loss(
    dataset: Dataset,
    subset,
    query,
    y: int,
    k: int,
    metric: str = "euclidean",
) -> float:
    """k-NN loss using only the training points listed in ``subset``.

    The ``k`` nearest subset members are taken in the canonical
    ``(distance, index)`` order, so the result is invariant to how the
    subset is enumerated.
    """
    subset = np.unique(np.asarray(list(subset), dtype=np.int64))
    if subset.shape[0] < k:
        raise ValueError(
            f"subset of size {subset.shape[0]} cannot support k={k} neighbors"
        )
    query = np.asarray(query, dtype=np.float64)
    dists = pairwise_to_query(dataset.points[subset], query, metric)
    local = canonical_argsort(dists)
    # canonical_argsort breaks distance ties by pool position; the pool is
    # sorted ascending, so pool position order equals training-index order.
    top = subset[local[:k]]
    return float(np.sum(dataset.labels[top] != y)) / k
