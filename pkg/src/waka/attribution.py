"""Per-point attribution scores for k-NN classifiers.

The central object is the signed per-loss-bin histogram produced by
:func:`marginal_contributions`: for a target training point and a query, it
is the difference between the loss distribution of k-NN models drawn from
subsets containing the point and the distribution from the paired subsets
without it. All Wasserstein-style scores (``waka``, ``waka_rem``,
``waka_add``, ``t_waka``) are functionals of that histogram; ``shapley_knn``
and ``loo`` operate directly on sorted neighbor orders.

The counting is exact. For a candidate at sorted rank ``j`` (1-based) whose
label-match indicator differs from the target's, the number of k-neighborhood
completions at each loss level is a product of two binomial coefficients over
the match/mismatch counts among ranks before ``j`` (the target excluded), and
the mass of all supersets folds into a ``2^-(j-1)`` factor. Ranks sharing the
target's match indicator contribute nothing: swapping two same-vote points in
a neighborhood leaves the loss unchanged. Truncating the sum at a fixed
horizon drops terms bounded by ``C(j, k) * 2^-(j-1)``, which is negligible
beyond rank ~100 for small k.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from .datasets import Dataset
from .knn import LossSpec
from .neighbors import NeighborIndex, NeighborOrder

METHODS = ("waka", "waka_rem", "waka_add", "shapley", "loo")

# Comparisons of loss-grid values against tau thresholds treat anything
# within this slack of equality as equal, so float noise in k*tau cannot
# flip a strict/non-strict boundary.
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class WakaParams:
    """Loss-range restriction and decision threshold for the score family."""

    k: int
    l_min: float = 0.0
    l_max: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.l_min <= self.l_max <= 1.0:
            raise ValueError(
                f"need 0 <= l_min <= l_max <= 1, got [{self.l_min}, {self.l_max}]"
            )
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass(frozen=True)
class ContributionHistogram:
    """Signed per-bin difference between the paired loss distributions.

    ``bins[b]`` is the probability mass the target point moves into loss
    ``b / k``: included-subset mass minus excluded-subset mass. Bins sum to
    zero (mass conservation over paired subsets).
    """

    bins: np.ndarray
    target_rank: int
    target_index: int
    query: np.ndarray
    horizon: int

    @property
    def k(self) -> int:
        return self.bins.shape[0] - 1


@lru_cache(maxsize=32)
def _comb_table(n_max: int, r_max: int) -> np.ndarray:
    table = np.zeros((n_max + 1, r_max + 1))
    for n in range(n_max + 1):
        for r in range(min(n, r_max) + 1):
            table[n, r] = float(comb(n, r))
    table.flags.writeable = False
    return table


def _comb_lookup(table: np.ndarray, n: np.ndarray, r: np.ndarray) -> np.ndarray:
    valid = (n >= 0) & (r >= 0) & (r <= n)
    n_c = np.clip(n, 0, table.shape[0] - 1)
    r_c = np.clip(r, 0, table.shape[1] - 1)
    return np.where(valid, table[n_c, r_c], 0.0)


def _rank_weight_vectors(match: np.ndarray, k: int) -> np.ndarray:
    """Signed bin vector each rank contributes to any earlier opposite-vote target.

    ``match`` holds the label-match indicators of the sorted ranks. Row ``r``
    (rank ``j = r + 1``) is the per-bin mass moved when the target point sits
    at some earlier rank and votes opposite to rank ``j``; the counts depend
    only on ``j`` and the vote totals before it, not on which earlier rank
    the target occupies.
    """
    h = match.shape[0]
    mj = match.astype(np.int64)
    j = np.arange(1, h + 1)
    table = _comb_table(max(h, k + 1), k + 1)

    m_before = np.concatenate([[0], np.cumsum(mj)[:-1]])
    cpv = m_before - (1 - mj)          # matches before rank j, target excluded
    cnv = (j - 2) - cpv                # mismatches before rank j, target excluded

    nv = np.arange(k + 1)              # mismatch votes per loss bin
    pv = k - nv
    # Included side: the target occupies a neighbor slot with vote 1 - mj.
    need_in_pv = pv[None, :] - (1 - mj)[:, None]
    need_in_nv = nv[None, :] - mj[:, None]
    # Excluded side: rank j itself occupies the slot with its own vote.
    need_out_pv = pv[None, :] - mj[:, None]
    need_out_nv = nv[None, :] - (1 - mj)[:, None]

    count_in = _comb_lookup(table, cpv[:, None], need_in_pv) * _comb_lookup(
        table, cnv[:, None], need_in_nv
    )
    count_out = _comb_lookup(table, cpv[:, None], need_out_pv) * _comb_lookup(
        table, cnv[:, None], need_out_nv
    )
    weights = (count_in - count_out) * np.ldexp(1.0, -(j - 1))[:, None]
    weights[j <= k] = 0.0
    return weights


def _contribution_matrix(match: np.ndarray, k: int) -> np.ndarray:
    """Contribution bins for every rank as target, in one pass.

    Row ``i`` sums the weight vectors of all later ranks whose match
    indicator differs from rank ``i``'s.
    """
    w = _rank_weight_vectors(match, k)
    is_match = match.astype(bool)
    w_from_match = np.where(is_match[:, None], w, 0.0)
    w_from_mismatch = np.where(is_match[:, None], 0.0, w)

    def suffix(a: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a)
        if a.shape[0] > 1:
            out[:-1] = np.cumsum(a[::-1], axis=0)[::-1][1:]
        return out

    return np.where(
        is_match[:, None], suffix(w_from_mismatch), suffix(w_from_match)
    )


def marginal_contributions(
    order: NeighborOrder,
    labels: np.ndarray,
    i: int,
    y_t: int,
    k: int,
    horizon: int | None = None,
) -> ContributionHistogram:
    """Exact signed loss-bin mass moved by the point at rank ``i`` of ``order``.

    ``i`` is the 0-based rank of the target point within ``order.ranked``.
    Ranks beyond ``horizon`` (default: the full order) are truncated.
    """
    if horizon is None:
        horizon = len(order)
    horizon = min(horizon, len(order))
    if horizon < k + 1:
        raise ValueError(f"horizon {horizon} must be >= k + 1 = {k + 1}")
    if not 0 <= i < len(order):
        raise ValueError(f"target rank {i} out of range for order of length {len(order)}")
    match = (labels[order.ranked[:horizon]] == y_t).astype(np.int64)
    if i >= horizon:
        bins = np.zeros(k + 1)
    else:
        bins = _contribution_matrix(match, k)[i]
    return ContributionHistogram(
        bins=bins,
        target_rank=i,
        target_index=int(order.ranked[i]),
        query=order.query,
        horizon=horizon,
    )


def _cdf_diff(bins: np.ndarray) -> np.ndarray:
    return np.cumsum(bins)


def _range_mask(k: int, lo: float, hi: float) -> np.ndarray:
    grid = np.arange(k + 1)
    return (grid >= k * lo - _GRID_EPS) & (grid <= k * hi + _GRID_EPS)


def waka(hist: ContributionHistogram, params: WakaParams | None = None) -> float:
    """1-Wasserstein distance between the paired loss distributions.

    Sums the absolute CDF differences over the loss bins inside
    ``[l_min, l_max]`` and scales by the bin width ``1/k``.
    """
    k = hist.k
    if params is None:
        params = WakaParams(k=k)
    mask = _range_mask(k, params.l_min, params.l_max)
    return float(np.sum(np.abs(_cdf_diff(hist.bins))[mask]) / k)


def _utility_cdf_diff(bins: np.ndarray) -> np.ndarray:
    # Pushing the loss bins through u = 1 - l reverses the bin order; the
    # utility CDF difference is then the prefix sum over ascending utility.
    return np.cumsum(bins[::-1])


def waka_rem(
    hist: ContributionHistogram, params: WakaParams, label_match: bool
) -> float:
    """Removal-oriented score: reward mass moved out of bad outcomes,
    penalize pure harm.

    When the target shares the query's label, the score sums the absolute
    utility-CDF differences over loss levels strictly above ``1 - tau``,
    each evaluated at its utility image ``1 - l`` (so at the utility bins
    strictly below ``tau``); ``tau = 1`` covers the full range, ``tau = 0``
    is an empty sum. Mismatched targets get the negated absolute loss-CDF
    differences over the full range. No ``1/k`` factor is applied.
    """
    k = hist.k
    if label_match:
        util = np.abs(_utility_cdf_diff(hist.bins))
        grid = np.arange(k + 1)
        mask = grid < k * params.tau - _GRID_EPS
        return float(np.sum(util[mask]))
    return -float(np.sum(np.abs(_cdf_diff(hist.bins))))


def waka_add(
    hist: ContributionHistogram, params: WakaParams, label_match: bool
) -> float:
    """Addition-oriented score, symmetric to :func:`waka_rem`.

    Matching targets earn the full-range absolute utility-CDF sum; mismatched
    targets are penalized by the loss-CDF differences at or below ``tau``.
    """
    k = hist.k
    if label_match:
        return float(np.sum(np.abs(_utility_cdf_diff(hist.bins))))
    grid = np.arange(k + 1)
    mask = grid <= k * params.tau + _GRID_EPS
    return -float(np.sum(np.abs(_cdf_diff(hist.bins))[mask]))


def t_waka(hist: ContributionHistogram, k: int, target_loss: float) -> float:
    """Membership-signed Wasserstein score split at an observed model loss.

    CDF-difference magnitudes at losses >= the observed loss count positively
    (the distribution shifts toward the observation when the point is
    included), those below count negatively; higher means stronger evidence
    of membership.
    """
    split = LossSpec(k).bin_of(target_loss)
    gaps = np.abs(_cdf_diff(hist.bins))
    return float((np.sum(gaps[split:]) - np.sum(gaps[:split])) / k)


def shapley_knn(
    order: NeighborOrder, labels: np.ndarray, y_t: int, k: int
) -> np.ndarray:
    """Exact Shapley values of every training point for one query.

    Requires the full ordering (the recursion starts at the farthest
    neighbor). Returns values indexed by training position, not rank.

    Utilities follow the sub-k convention: a subset smaller than ``k``
    averages all its votes over ``k`` and the empty subset is worth 0. The
    farthest neighbor's value is ``min(k, N) / (k * N)`` times its vote,
    which reduces to the familiar ``1/N`` scaling when ``N >= k`` and keeps
    the recursion exact when ``N < k``.
    """
    n = len(labels)
    if len(order) != n:
        raise ValueError(
            f"shapley_knn needs the full ordering of all {n} points, got {len(order)}"
        )
    match = (labels[order.ranked] == y_t).astype(np.float64)
    by_rank = np.empty(n)
    by_rank[n - 1] = match[n - 1] * min(k, n) / (k * n)
    if n > 1:
        i = np.arange(1, n)
        steps = (match[:-1] - match[1:]) / k * np.minimum(k, i) / i
        by_rank[:-1] = by_rank[n - 1] + np.cumsum(steps[::-1])[::-1]
    values = np.empty(n)
    values[order.ranked] = by_rank
    return values


def loo(
    order: NeighborOrder, labels: np.ndarray, i: int, y_t: int, k: int
) -> float:
    """Leave-one-out utility change for the point at rank ``i`` of ``order``.

    Zero for points outside the k nearest; otherwise the vote difference
    between the point and the (k+1)-th neighbor that replaces it.
    """
    if len(order) <= k:
        raise ValueError(f"leave-one-out needs more than k={k} points, got {len(order)}")
    if not 0 <= i < len(order):
        raise ValueError(f"rank {i} out of range for order of length {len(order)}")
    if i >= k:
        return 0.0
    match_i = float(labels[order.ranked[i]] == y_t)
    match_next = float(labels[order.ranked[k]] == y_t)
    return (match_i - match_next) / k


def aggregate_test(per_test_scores: np.ndarray) -> np.ndarray:
    """Mean per-training-point score over a ``(test, train)`` score matrix."""
    per_test_scores = np.asarray(per_test_scores, dtype=np.float64)
    if per_test_scores.ndim != 2 or per_test_scores.shape[0] == 0:
        raise ValueError("need a non-empty (test, train) score matrix")
    return per_test_scores.mean(axis=0)


def _rank_of(order: NeighborOrder, i: int) -> int:
    hits = np.nonzero(order.ranked == i)[0]
    if hits.shape[0] == 0:
        raise ValueError(f"point {i} does not appear in the order")
    return int(hits[0])


def self_attribution(
    dataset: Dataset,
    index: NeighborIndex,
    i: int,
    k: int,
    method: str = "waka",
    params: WakaParams | None = None,
    horizon: int | None = None,
) -> float:
    """Attribution of point ``i`` toward its own prediction.

    The query is the point's own feature vector with its own label, and the
    point participates as its own candidate neighbor (rank 0 at distance 0).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if params is None:
        params = WakaParams(k=k)
    y = int(dataset.labels[i])
    if method in ("shapley", "loo"):
        order = index.order_for_point(i, horizon=dataset.n)
        if method == "shapley":
            return float(shapley_knn(order, dataset.labels, y, k)[i])
        return loo(order, dataset.labels, _rank_of(order, i), y, k)
    order = index.order_for_point(i, horizon=horizon)
    hist = marginal_contributions(
        order, dataset.labels, _rank_of(order, i), y, k, horizon=horizon
    )
    if method == "waka":
        return waka(hist, params)
    if method == "waka_rem":
        return waka_rem(hist, params, label_match=True)
    return waka_add(hist, params, label_match=True)


@dataclass
class ContributionStore:
    """Per-point decomposition of the self contribution histogram.

    For each point, ``influencers[z]`` maps a neighbor's training index to
    the signed bin vector that neighbor contributes to ``z``'s histogram;
    the vectors sum to ``bins[z]`` exactly. Storing them makes the self
    score after removing a neighbor an O(1) update.
    """

    k: int
    horizon: int
    bins: np.ndarray
    influencers: list[dict[int, np.ndarray]]
    neighborhoods: list[np.ndarray]

    def self_score(self, z: int, params: WakaParams | None = None) -> float:
        hist = ContributionHistogram(
            bins=self.bins[z],
            target_rank=0,
            target_index=z,
            query=np.empty(0),
            horizon=self.horizon,
        )
        return waka(hist, params)


def build_contribution_store(
    dataset: Dataset,
    index: NeighborIndex,
    k: int,
    horizon: int | None = None,
) -> ContributionStore:
    """Self contribution histograms for all points, split by influencing neighbor."""
    n = dataset.n
    if horizon is None:
        horizon = min(n, 100)
    horizon = min(horizon, n)
    bins = np.zeros((n, k + 1))
    influencers: list[dict[int, np.ndarray]] = []
    neighborhoods: list[np.ndarray] = []
    for z in range(n):
        order = index.order_for_point(z, horizon=horizon)
        y = int(dataset.labels[z])
        match = (dataset.labels[order.ranked] == y).astype(np.int64)
        rank_z = _rank_of(order, z)
        w = _rank_weight_vectors(match, k)
        per_point: dict[int, np.ndarray] = {}
        for j in range(rank_z + 1, len(order)):
            if match[j] != match[rank_z] and np.any(w[j] != 0.0):
                vec = w[j].copy()
                per_point[int(order.ranked[j])] = vec
                bins[z] += vec
        influencers.append(per_point)
        neighborhoods.append(order.ranked.copy())
    return ContributionStore(
        k=k, horizon=horizon, bins=bins, influencers=influencers,
        neighborhoods=neighborhoods,
    )


def waka_influence(
    store: ContributionStore,
    removed,
    z: int,
    params: WakaParams | None = None,
) -> float:
    """Total change in ``z``'s self score caused by removing the given points.

    Sums, over removed points inside ``z``'s stored neighborhood, the self
    score recomputed with that point's stored vector subtracted minus the
    baseline self score. Removed sets disjoint from the neighborhood yield 0.
    """
    removed = set(int(r) for r in removed)
    if z in removed:
        raise ValueError(f"target point {z} cannot be part of the removed set")
    if params is None:
        params = WakaParams(k=store.k)
    relevant = removed.intersection(store.influencers[z].keys())
    if not relevant:
        return 0.0
    base_hist = ContributionHistogram(
        bins=store.bins[z], target_rank=0, target_index=z,
        query=np.empty(0), horizon=store.horizon,
    )
    base = waka(base_hist, params)
    total = 0.0
    for j in relevant:
        reduced = ContributionHistogram(
            bins=store.bins[z] - store.influencers[z][j],
            target_rank=0, target_index=z, query=np.empty(0),
            horizon=store.horizon,
        )
        total += waka(reduced, params) - base
    return total


@dataclass
class AttributionReport:
    """Scores for every training point under one method and mode."""

    method: str
    mode: str
    scores: np.ndarray
    config: dict = field(default_factory=dict)
    point_ids: np.ndarray | None = None

    def write(self, csv_path, sidecar_path=None) -> None:
        ids = (
            self.point_ids
            if self.point_ids is not None
            else np.arange(self.scores.shape[0])
        )
        with open(csv_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["point_id", "score"])
            for pid, score in zip(ids, self.scores):
                writer.writerow([int(pid), repr(float(score))])
        if sidecar_path is not None:
            payload = {"method": self.method, "mode": self.mode, **self.config}
            with open(sidecar_path, "w", encoding="utf-8") as handle:
                json.dump(payload, handle, indent=2, sort_keys=True)
                handle.write("\n")


def _waka_family_rows(
    bins_matrix: np.ndarray, match: np.ndarray, method: str, params: WakaParams
) -> np.ndarray:
    """Vectorized per-rank scores from a matrix of contribution bins."""
    k = bins_matrix.shape[1] - 1
    cdf = np.cumsum(bins_matrix, axis=1)
    abs_cdf = np.abs(cdf)
    if method == "waka":
        mask = _range_mask(k, params.l_min, params.l_max)
        return abs_cdf[:, mask].sum(axis=1) / k
    util = np.abs(np.cumsum(bins_matrix[:, ::-1], axis=1))
    grid = np.arange(k + 1)
    is_match = match.astype(bool)
    if method == "waka_rem":
        umask = grid < k * params.tau - _GRID_EPS
        pos = util[:, umask].sum(axis=1)
        neg = -abs_cdf.sum(axis=1)
    else:  # waka_add
        lmask = grid <= k * params.tau + _GRID_EPS
        pos = util.sum(axis=1)
        neg = -abs_cdf[:, lmask].sum(axis=1)
    return np.where(is_match, pos, neg)


def score_dataset(
    dataset: Dataset,
    index: NeighborIndex,
    k: int,
    method: str,
    mode: str = "self",
    params: WakaParams | None = None,
    test_set: Dataset | None = None,
    horizon: int | None = None,
) -> np.ndarray:
    """Per-training-point scores for a method in self or test-aggregated mode."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if mode not in ("self", "test"):
        raise ValueError(f"unknown mode {mode!r}; expected 'self' or 'test'")
    if params is None:
        params = WakaParams(k=k)
    n = dataset.n
    if mode == "self":
        return np.array(
            [
                self_attribution(dataset, index, i, k, method, params, horizon=horizon)
                for i in range(n)
            ]
        )
    if test_set is None or test_set.n == 0:
        raise ValueError("test mode requires a non-empty test set")

    totals = np.zeros(n)
    for t in range(test_set.n):
        query = test_set.points[t]
        y_t = int(test_set.labels[t])
        if method == "shapley":
            order = index.query_sorted(query, horizon=n)
            totals += shapley_knn(order, dataset.labels, y_t, k)
            continue
        if method == "loo":
            if n <= k:
                raise ValueError(
                    f"leave-one-out needs more than k={k} training points, have {n}"
                )
            order = index.query_sorted(query, horizon=k + 1)
            match_top = (dataset.labels[order.ranked[: k + 1]] == y_t).astype(float)
            totals[order.ranked[:k]] += (match_top[:k] - match_top[k]) / k
            continue
        order = index.query_sorted(query, horizon=horizon)
        match = (dataset.labels[order.ranked] == y_t).astype(np.int64)
        bins_matrix = _contribution_matrix(match, k)
        row_scores = _waka_family_rows(bins_matrix, match, method, params)
        totals[order.ranked] += row_scores
    return totals / test_set.n
