import numpy as np
import pytest

from waka.datasets import Dataset
from waka.neighbors import build_index


def random_labeled_dataset(rng, n, dim=2, n_classes=2):
    """Random points with dense labels covering {0..C-1}."""
    points = rng.normal(size=(n, dim))
    raw = rng.integers(0, n_classes, size=n)
    _, labels = np.unique(raw, return_inverse=True)
    return Dataset(points=points, labels=labels.astype(np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def tiny_pair():
    """Two points: index 0 matches label 0 and is nearer to its own location."""
    ds = Dataset(points=np.array([[0.0, 0.0], [1.0, 0.0]]), labels=np.array([0, 1]))
    return ds, build_index(ds)
