"""Canonical sorted-neighbor queries over an immutable training set.

Every ranking in the package flows through :meth:`NeighborIndex.query_sorted`,
which orders training points by ``(distance, training index)``. The index pair
tie-break makes orderings deterministic, which downstream exact-counting code
and the brute-force oracles both rely on.

Distances come from one canonical formula per metric (``euclidean`` or
``cosine``). A kd-tree only preselects a candidate pool for truncated
queries; the pool is re-scored with the canonical formula before ranking, so
tree internals never influence the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .datasets import Dataset
from .errors import ValidationError

METRICS = ("euclidean", "cosine")

# Relative slack applied to the kd-tree candidate radius so that 1-ulp
# disagreements between tree-internal and canonical distances cannot drop a
# boundary-tied point from the pool.
_RADIUS_SLACK = 1e-9

DEFAULT_HORIZON = 100


@dataclass(frozen=True)
class NeighborOrder:
    """Training indices ranked by non-decreasing distance to ``query``."""

    query: np.ndarray
    ranked: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.ranked.shape[0]


def euclidean_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query[None, :]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def cosine_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ValidationError("cosine distance is undefined for a zero query vector")
    # einsum row reductions depend only on each row's contents, so results are
    # identical whether computed on the full matrix or a candidate slice.
    dots = np.einsum("ij,ij->i", points, np.broadcast_to(query, points.shape))
    norms = np.sqrt(np.einsum("ij,ij->i", points, points))
    return 1.0 - dots / (norms * qn)


def pairwise_to_query(points: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return euclidean_distances(points, query)
    if metric == "cosine":
        return cosine_distances(points, query)
    raise ValueError(f"unknown metric {metric!r}")


def canonical_argsort(distances: np.ndarray) -> np.ndarray:
    """Indices sorted by distance, equal distances by ascending index."""
    return np.lexsort((np.arange(distances.shape[0]), distances))


class NeighborIndex:
    """Immutable nearest-neighbor index over a dataset.

    Queries are read-only and safe to issue from concurrent workers.
    """

    def __init__(self, dataset: Dataset, metric: str = "euclidean"):
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        self.dataset = dataset
        self.metric = metric
        if metric == "cosine":
            norms = np.linalg.norm(dataset.points, axis=1)
            if np.any(norms == 0.0):
                raise ValidationError(
                    "cosine metric requires nonzero vectors; "
                    f"row {int(np.argmin(norms))} has zero norm"
                )
            self._tree_points = dataset.points / norms[:, None]
        else:
            self._tree_points = dataset.points
        self._tree = cKDTree(self._tree_points)

    @property
    def n(self) -> int:
        return self.dataset.n

    def _candidate_pool(self, query: np.ndarray, horizon: int) -> np.ndarray:
        """Superset of the canonical top-``horizon`` indices."""
        if self.metric == "cosine":
            tree_query = query / np.linalg.norm(query)
        else:
            tree_query = query
        dists, _ = self._tree.query(tree_query, k=horizon)
        radius = float(np.max(dists)) * (1.0 + _RADIUS_SLACK) + 1e-300
        pool = self._tree.query_ball_point(tree_query, r=radius)
        return np.asarray(pool, dtype=np.int64)

    def query_sorted(self, query, horizon: int | None = None) -> NeighborOrder:
        """The ``horizon`` nearest training indices in canonical order.

        ``horizon`` defaults to ``min(N, 100)`` and is clamped to ``N``.
        """
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dataset.dim,):
            raise ValueError(
                f"query has shape {query.shape}, expected ({self.dataset.dim},)"
            )
        if horizon is None:
            horizon = min(self.n, DEFAULT_HORIZON)
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        horizon = min(horizon, self.n)
        if self.metric == "cosine" and np.linalg.norm(query) == 0.0:
            raise ValidationError("cosine distance is undefined for a zero query vector")

        if horizon >= self.n:
            pool = np.arange(self.n, dtype=np.int64)
        else:
            pool = self._candidate_pool(query, horizon)
        dists = pairwise_to_query(self.dataset.points[pool], query, self.metric)
        order = np.lexsort((pool, dists))[:horizon]
        return NeighborOrder(
            query=query, ranked=pool[order], distances=dists[order]
        )

    def order_for_point(self, i: int, horizon: int | None = None) -> NeighborOrder:
        """Sorted order for training point ``i`` queried against itself."""
        return self.query_sorted(self.dataset.points[i], horizon=horizon)


def build_index(dataset: Dataset, metric: str = "euclidean") -> NeighborIndex:
    return NeighborIndex(dataset, metric=metric)


def query_sorted(index: NeighborIndex, query, horizon: int | None = None) -> NeighborOrder:
    return index.query_sorted(query, horizon=horizon)
