"""Brute-force ground truth by exhaustive subset enumeration.

These routines realize the paired-subset loss distributions and exact
Shapley values directly from their definitions, with no shortcuts shared
with the production code paths they validate. Size guards keep worst-case
runtime at desk scale; oracles exist to validate, not to scale.

Subset semantics: both loss distributions range over pairs ``(S, S + {i})``
with ``S`` drawn from the ``2^(N-1)`` subsets excluding the target point and
``|S| >= k`` (so the loss is defined on both sides of the pair). Every pair
carries weight ``2^-(N-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .datasets import Dataset
from .neighbors import canonical_argsort, pairwise_to_query

MAX_N_PMF = 22
MAX_N_SHAPLEY = 14
_CHUNK_BITS = 16


@dataclass(frozen=True)
class PmfPair:
    """Histograms of the paired loss distributions on the ``k + 1`` loss bins.

    ``pmf_in[b]`` is the probability mass of loss ``b / k`` over subsets that
    include the target point, ``pmf_out[b]`` the mass over the paired subsets
    that exclude it. Both carry the same total mass.
    """

    pmf_in: np.ndarray
    pmf_out: np.ndarray
    total_mass: float

    @property
    def difference(self) -> np.ndarray:
        return self.pmf_in - self.pmf_out


def _sorted_match_vector(
    dataset: Dataset, query: np.ndarray, y_t: int, metric: str
) -> tuple[np.ndarray, np.ndarray]:
    """Dataset indices in canonical order plus their label-match indicators."""
    dists = pairwise_to_query(dataset.points, np.asarray(query, dtype=np.float64), metric)
    order = canonical_argsort(dists)
    match = (dataset.labels[order] == y_t).astype(np.int64)
    return order, match


def _mask_bits(masks: np.ndarray, width: int) -> np.ndarray:
    return ((masks[:, None] >> np.arange(width, dtype=np.uint64)[None, :]) & 1).astype(
        np.int64
    )


def _loss_bins(bits: np.ndarray, match: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss bin of the k nearest selected columns, plus a validity mask.

    Columns must be ordered nearest-first. Rows with fewer than ``k`` selected
    columns are flagged invalid.
    """
    selcount = np.cumsum(bits, axis=1)
    total = selcount[:, -1]
    valid = total >= k
    hit = selcount == k
    kth_col = np.argmax(hit, axis=1)
    matchcum = np.cumsum(bits * match[None, :], axis=1)
    rows = np.arange(bits.shape[0])
    matches_at_k = matchcum[rows, kth_col]
    return k - matches_at_k, valid


def enumerate_pmfs(
    dataset: Dataset,
    i: int,
    query,
    y_t: int,
    k: int,
    metric: str = "euclidean",
) -> PmfPair:
    """Exhaustively enumerate the paired loss distributions for point ``i``.

    Iterates every subset ``S`` of the other ``N - 1`` training points with
    ``|S| >= k``, accumulating weight ``2^-(N-1)`` at the k-NN loss of ``S``
    (excluded side) and of ``S + {i}`` (included side), both evaluated at
    ``query`` with label ``y_t``.
    """
    n = dataset.n
    if n > MAX_N_PMF:
        raise ValueError(f"N={n} exceeds the enumeration guard N <= {MAX_N_PMF}")
    if not 0 <= i < n:
        raise ValueError(f"target index {i} out of range for N={n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    order, match = _sorted_match_vector(dataset, query, y_t, metric)
    pos_i = int(np.argwhere(order == i)[0][0])
    cand_match = np.delete(match, pos_i)
    m = n - 1
    weight = 2.0 ** (-m)

    pmf_in = np.zeros(k + 1)
    pmf_out = np.zeros(k + 1)
    if m < k:
        # No candidate subset can reach size k; both distributions are empty.
        return PmfPair(pmf_in=pmf_in, pmf_out=pmf_out, total_mass=0.0)
    # Full-order columns with the target's column forced on for the included
    # side: candidates keep their sorted positions, the target sits at pos_i.
    for start in range(0, 1 << m, 1 << _CHUNK_BITS):
        stop = min(start + (1 << _CHUNK_BITS), 1 << m)
        masks = np.arange(start, stop, dtype=np.uint64)
        bits = _mask_bits(masks, m)
        bins_out, valid = _loss_bins(bits, cand_match, k)

        bits_full = np.insert(bits, pos_i, 1, axis=1)
        bins_in, _ = _loss_bins(bits_full, match, k)

        pmf_out += weight * np.bincount(bins_out[valid], minlength=k + 1)
        pmf_in += weight * np.bincount(bins_in[valid], minlength=k + 1)

    return PmfPair(pmf_in=pmf_in, pmf_out=pmf_out, total_mass=float(pmf_out.sum()))


def _subset_utilities(bits: np.ndarray, match: np.ndarray, k: int) -> np.ndarray:
    """Utility of each row's selected subset under the sub-k convention.

    ``U(S)`` averages the label matches of the ``min(k, |S|)`` nearest
    members over ``k``; the empty subset has utility 0.
    """
    selcount = np.cumsum(bits, axis=1)
    total = selcount[:, -1]
    matchcum = np.cumsum(bits * match[None, :], axis=1)
    rows = np.arange(bits.shape[0])
    kth_col = np.argmax(selcount == k, axis=1)
    matches = np.where(total >= k, matchcum[rows, kth_col], matchcum[:, -1])
    return matches / k


def brute_shapley(
    dataset: Dataset,
    query,
    y_t: int,
    k: int,
    metric: str = "euclidean",
) -> np.ndarray:
    """Exact Shapley values by direct subset-weighted summation.

    Each point's value is the average over all subsets ``S`` of the other
    points of ``U(S + {i}) - U(S)``, with weight ``1 / (N * C(N-1, |S|))``.
    """
    n = dataset.n
    if n > MAX_N_SHAPLEY:
        raise ValueError(f"N={n} exceeds the enumeration guard N <= {MAX_N_SHAPLEY}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    order, match = _sorted_match_vector(dataset, query, y_t, metric)
    m = n - 1
    size_weight = np.array([1.0 / (n * comb(m, s)) for s in range(m + 1)])

    values = np.zeros(n)
    if m == 0:
        values[order[0]] = min(k, 1) * match[0] / k
        return values
    masks = np.arange(1 << m, dtype=np.uint64)
    bits = _mask_bits(masks, m)
    sizes = np.sum(bits, axis=1)
    for pos_i in range(n):
        cand_match = np.delete(match, pos_i)
        util_out = _subset_utilities(bits, cand_match, k)
        bits_full = np.insert(bits, pos_i, 1, axis=1)
        util_in = _subset_utilities(bits_full, match, k)
        values[order[pos_i]] = float(np.sum(size_weight[sizes] * (util_in - util_out)))
    return values
