import numpy as np
import pytest

from waka.datasets import Dataset
from waka.errors import ValidationError
from waka.neighbors import build_index, pairwise_to_query

from conftest import random_labeled_dataset


def naive_order(points, query, metric, horizon):
    """Reference ordering: full canonical sort by (distance, index)."""
    dists = pairwise_to_query(points, query, metric)
    order = np.lexsort((np.arange(len(dists)), dists))[:horizon]
    return order, dists[order]


def test_self_distance_first():
    ds = Dataset(points=np.array([[0.0, 0], [3, 0], [5, 0]]), labels=np.array([0, 1, 0]))
    idx = build_index(ds)
    for i in range(3):
        order = idx.query_sorted(ds.points[i], horizon=3)
        assert order.ranked[0] == i
        assert order.distances[0] == 0.0


def test_tie_breaks_toward_lower_index():
    ds = Dataset(
        points=np.array([[1.0, 0], [-1.0, 0], [0.0, 2]]), labels=np.array([0, 1, 0])
    )
    idx = build_index(ds)
    order = idx.query_sorted(np.array([0.0, 0.0]), horizon=3)
    assert order.ranked.tolist() == [0, 1, 2]
    assert order.distances[0] == order.distances[1] == 1.0


def test_horizon_clamped_and_validated():
    ds = Dataset(points=np.arange(6.0).reshape(3, 2), labels=np.array([0, 1, 0]))
    idx = build_index(ds)
    assert len(idx.query_sorted(np.zeros(2), horizon=50)) == 3
    with pytest.raises(ValueError):
        idx.query_sorted(np.zeros(2), horizon=0)
    with pytest.raises(ValueError):
        idx.query_sorted(np.zeros(3), horizon=1)


def test_cosine_rejects_zero_vectors():
    ds = Dataset(points=np.array([[0.0, 0.0], [1.0, 0.0]]), labels=np.array([0, 1]))
    with pytest.raises(ValidationError):
        build_index(ds, metric="cosine")
    ds2 = Dataset(points=np.array([[1.0, 0.0], [0.0, 1.0]]), labels=np.array([0, 1]))
    idx = build_index(ds2, metric="cosine")
    with pytest.raises(ValidationError):
        idx.query_sorted(np.zeros(2), horizon=1)


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_matches_naive_sort_on_random_datasets(metric, rng):
    """Truncated kd-tree queries agree with the exhaustive canonical sort."""
    for _ in range(200):
        n = int(rng.integers(2, 60))
        dim = int(rng.integers(1, 5))
        points = rng.normal(size=(n, dim))
        if metric == "cosine":
            points[np.linalg.norm(points, axis=1) < 1e-3] += 1.0
        ds = random_labeled_dataset(rng, n, dim)
        ds = Dataset(points=points, labels=ds.labels)
        idx = build_index(ds, metric=metric)
        query = rng.normal(size=dim)
        if metric == "cosine" and np.linalg.norm(query) < 1e-3:
            query = query + 1.0
        horizon = int(rng.integers(1, n + 1))
        got = idx.query_sorted(query, horizon=horizon)
        want_idx, want_dist = naive_order(ds.points, query, metric, horizon)
        assert np.array_equal(got.ranked, want_idx)
        assert np.array_equal(got.distances, want_dist)


def test_horizon_prefix_refinement(rng):
    """Any truncated order is a prefix of the full order."""
    ds = random_labeled_dataset(rng, 80, 3)
    idx = build_index(ds)
    query = rng.normal(size=3)
    full = idx.query_sorted(query, horizon=80)
    for horizon in (1, 5, 17, 42, 80):
        part = idx.query_sorted(query, horizon=horizon)
        assert np.array_equal(part.ranked, full.ranked[:horizon])


def test_default_horizon_on_large_dataset(rng):
    ds = random_labeled_dataset(rng, 5000, 3)
    idx = build_index(ds)
    query = rng.normal(size=3)
    part = idx.query_sorted(query)  # defaults to min(N, 100)
    assert len(part) == 100
    want_idx, _ = naive_order(ds.points, query, "euclidean", 100)
    assert np.array_equal(part.ranked, want_idx)


def test_exact_duplicate_points_tie_break(rng):
    pts = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    ds = Dataset(points=pts, labels=np.array([0, 1, 0, 1]))
    idx = build_index(ds)
    order = idx.query_sorted(np.array([1.0, 1.0]), horizon=4)
    assert order.ranked.tolist() == [0, 1, 3, 2]
