"""Membership-inference machinery: security games, attack scorers, ROC metrics.

A security game splits a population in half, treats one half as the target
k-NN model's training set, draws a balanced set of members and non-members,
and asks an attack scorer to rate each drawn point's membership from the
target model's loss on it. Higher scores mean stronger membership evidence;
the fixed decision threshold for accuracy-style metrics is 0.

Scorers share a common calling convention so games and per-point attack
success rates can swap attacks freely:

* ``twaka``   - signed Wasserstein split of the point's own contribution
  histogram at the observed loss, over one reusable population-wide index.
* ``lira``    - likelihood ratio of the observed loss under shadow k-NN
  models trained on random population halves with and without the point.
* ``conf`` / ``conf_calib`` - target-model confidence compared against
  reference models built on the point's local neighborhood.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .attribution import marginal_contributions, t_waka
from .datasets import Dataset
from .knn import knn_loss
from .neighbors import NeighborIndex, build_index, pairwise_to_query

SCORERS = ("twaka", "lira", "conf", "conf_calib")

_CALIB_STD_FLOOR = 1e-6


@dataclass
class GameConfig:
    """Protocol parameters for a batch of security games."""

    k: int
    games: int = 48
    shadows: int = 16
    eval_points: int = 100
    neighborhood: int = 100
    seed_list: list[int] | None = None
    scorer: str = "twaka"
    metric: str = "euclidean"

    def __post_init__(self):
        if self.seed_list is None:
            self.seed_list = list(range(self.games))
        if len(self.seed_list) != self.games:
            raise ValueError(
                f"seed_list has {len(self.seed_list)} entries for {self.games} games"
            )
        if self.eval_points % 2 != 0:
            raise ValueError("eval_points must be even (balanced members/non-members)")
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")


@dataclass
class GameResult:
    """Transcript of one security game."""

    point_ids: np.ndarray
    membership: np.ndarray
    scores: np.ndarray
    target_losses: np.ndarray
    game_seed: int


@dataclass
class RocSummary:
    auc: float
    tpr_at_fpr: dict[float, float]
    threshold_accuracy: float

    def to_json(self, path) -> None:
        payload = {
            "auc": self.auc,
            "tpr_at_fpr": {repr(float(k)): v for k, v in self.tpr_at_fpr.items()},
            "threshold_accuracy": self.threshold_accuracy,
        }
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")


@dataclass(frozen=True)
class EvalPoint:
    """One drawn point as seen by an attack scorer."""

    index: int
    vector: np.ndarray
    label: int
    target_loss: float
    target_confidence: float


def roc_metrics(scores, membership, fpr_levels=(0.01, 0.05, 0.1)) -> RocSummary:
    """Exact step ROC with tied scores grouped into single steps.

    AUC uses the trapezoid rule (equivalently, rank statistics with half
    credit for ties). ``tpr_at_fpr`` reports, per requested level, the
    largest TPR achievable at an operating point with FPR <= level.
    ``threshold_accuracy`` is the best balanced accuracy over thresholds.
    """
    scores = np.asarray(scores, dtype=np.float64)
    membership = np.asarray(membership, dtype=bool)
    if scores.shape != membership.shape or scores.ndim != 1:
        raise ValueError("scores and membership must be equal-length 1-d arrays")
    n_pos = int(membership.sum())
    n_neg = membership.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both members and non-members are required for a ROC")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_member = membership[order]
    cum_tp = np.cumsum(sorted_member)
    cum_fp = np.cumsum(~sorted_member)
    # Last position of each tie group is a realizable operating point.
    group_end = np.nonzero(np.diff(sorted_scores, append=np.nan) != 0)[0]
    tpr = np.concatenate([[0.0], cum_tp[group_end] / n_pos])
    fpr = np.concatenate([[0.0], cum_fp[group_end] / n_neg])

    auc = float(np.trapezoid(tpr, fpr))
    tpr_at = {}
    for level in fpr_levels:
        ok = fpr <= level + 1e-12
        tpr_at[float(level)] = float(tpr[ok].max()) if np.any(ok) else 0.0
    threshold_accuracy = float(np.max((tpr + 1.0 - fpr) / 2.0))
    return RocSummary(auc=auc, tpr_at_fpr=tpr_at, threshold_accuracy=threshold_accuracy)


class TWakaScorer:
    """Target-loss-signed Wasserstein attack over one shared population index.

    The per-point contribution histogram does not depend on the game, so it
    is computed once per point and reused across games; only the observed
    loss changes.
    """

    def __init__(self, population: Dataset, index: NeighborIndex, k: int,
                 neighborhood: int = 100):
        if neighborhood < k + 1:
            raise ValueError(f"neighborhood must be >= k + 1, got {neighborhood}")
        self.population = population
        self.index = index
        self.k = k
        self.neighborhood = min(neighborhood, population.n)
        self._hist_cache: dict[int, object] = {}

    def _hist(self, point: EvalPoint):
        cached = self._hist_cache.get(point.index)
        if cached is None:
            order = self.index.query_sorted(point.vector, horizon=self.neighborhood)
            hits = np.nonzero(order.ranked == point.index)[0]
            if hits.shape[0] == 0:
                raise ValueError(
                    f"point {point.index} not found within its own neighborhood"
                )
            cached = marginal_contributions(
                order, self.population.labels, int(hits[0]), point.label,
                self.k, horizon=self.neighborhood,
            )
            self._hist_cache[point.index] = cached
        return cached

    def score(self, point: EvalPoint, rng) -> float:
        return t_waka(self._hist(point), self.k, point.target_loss)


def twaka_score(
    population: Dataset,
    index: NeighborIndex,
    z_vector,
    z_label: int,
    z_index: int,
    target_loss: float,
    k: int,
    neighborhood: int = 100,
) -> float:
    """One-off t-WaKA score for a population point (see :class:`TWakaScorer`)."""
    scorer = TWakaScorer(population, index, k, neighborhood)
    point = EvalPoint(
        index=z_index, vector=np.asarray(z_vector, dtype=np.float64),
        label=z_label, target_loss=target_loss, target_confidence=float("nan"),
    )
    return scorer.score(point, None)


def _shadow_loss(dists: np.ndarray, match: np.ndarray, selected: np.ndarray,
                 k: int, self_included: bool) -> float:
    """Loss of the scored point under one shadow half.

    ``dists``/``match`` describe the candidate pool (the point itself
    excluded); ``selected`` indexes the half actually drawn. When the point
    is in the training half it occupies the nearest slot itself.
    """
    take = k - 1 if self_included else k
    mism = 0
    if take > 0:
        d = dists[selected]
        if d.shape[0] < take:
            raise ValueError("shadow half smaller than the neighbor count")
        nearest = np.argpartition(d, take - 1)[:take]
        mism = int(np.sum(~match[selected][nearest]))
    return mism / k


def lira_log_ratio(
    in_losses, out_losses, target_loss: float, k: int, shadows: int
) -> float:
    """Laplace-smoothed log likelihood ratio of a loss under the two shadow sets."""
    lam = 1.0 / (shadows * (k + 1))
    b = int(round(target_loss * k))
    in_losses = np.asarray(in_losses, dtype=np.float64)
    out_losses = np.asarray(out_losses, dtype=np.float64)
    p_in = np.mean(np.round(in_losses * k).astype(int) == b)
    p_out = np.mean(np.round(out_losses * k).astype(int) == b)
    return math.log((p_in + lam) / (p_out + lam))


def lira_score(
    z_vector,
    z_label: int,
    target_loss: float,
    shadow_pool: Dataset,
    k: int,
    shadows: int,
    rng,
    metric: str = "euclidean",
    exclude_index: int | None = None,
) -> float:
    """Online likelihood-ratio attack score via shadow k-NN models.

    Each shadow trains on a random half of the pool; the scored point joins
    the half with probability 1/2 (taking one slot), so both discrete loss
    histograms are empirical. If a round of coin flips leaves either side
    empty it is redrawn, up to 5 attempts.
    """
    if shadows < 2:
        raise ValueError(f"need at least 2 shadow models, got {shadows}")
    z_vector = np.asarray(z_vector, dtype=np.float64)
    keep = np.ones(shadow_pool.n, dtype=bool)
    if exclude_index is not None:
        keep[exclude_index] = False
    pool_points = shadow_pool.points[keep]
    pool_match = shadow_pool.labels[keep] == z_label
    dists = pairwise_to_query(pool_points, z_vector, metric)
    m = pool_points.shape[0]
    half = shadow_pool.n // 2
    if half < k or m < half:
        raise ValueError("shadow pool too small for the requested half-split")

    for _ in range(5):
        flips = rng.random(shadows) < 0.5
        if flips.any() and (~flips).any():
            break
    else:
        raise RuntimeError("degenerate shadow sampling: all flips on one side")

    in_losses, out_losses = [], []
    for included in flips:
        size = half - 1 if included else half
        selected = rng.choice(m, size=size, replace=False)
        loss = _shadow_loss(dists, pool_match, selected, k, self_included=included)
        (in_losses if included else out_losses).append(loss)
    return lira_log_ratio(in_losses, out_losses, target_loss, k, shadows)


class LiraScorer:
    def __init__(self, population: Dataset, k: int, shadows: int = 16,
                 metric: str = "euclidean"):
        self.population = population
        self.k = k
        self.shadows = shadows
        self.metric = metric

    def score(self, point: EvalPoint, rng) -> float:
        return lira_score(
            point.vector, point.label, point.target_loss, self.population,
            self.k, self.shadows, rng, metric=self.metric,
            exclude_index=point.index,
        )


def conf_score(
    z_vector,
    z_label: int,
    target_confidence: float,
    index: NeighborIndex,
    k: int,
    neighborhood: int = 100,
    calibrated: bool = False,
    reference_models: int = 16,
    rng=None,
    exclude_index: int | None = None,
) -> float:
    """Confidence-gap attack against reference models on the local neighborhood.

    The reference k-NN is built from the point's ``neighborhood`` nearest
    population points (the point itself excluded). Uncalibrated: the gap to
    that single reference. Calibrated: the gap standardized against
    ``reference_models`` random half-subsets of the neighborhood.
    """
    z_vector = np.asarray(z_vector, dtype=np.float64)
    order = index.query_sorted(z_vector, horizon=min(neighborhood + 1, index.n))
    ranked = order.ranked
    if exclude_index is not None:
        ranked = ranked[ranked != exclude_index]
    ranked = ranked[:neighborhood]
    labels = index.dataset.labels
    match = labels[ranked] == z_label
    if ranked.shape[0] < k:
        raise ValueError("neighborhood smaller than k after excluding the point")
    if not calibrated:
        conf_ref = float(np.mean(match[:k]))
        return float(target_confidence) - conf_ref
    half = ranked.shape[0] // 2
    if half < k:
        raise ValueError("neighborhood halves smaller than k; enlarge neighborhood")
    confs = np.empty(reference_models)
    for r in range(reference_models):
        picked = np.sort(rng.choice(ranked.shape[0], size=half, replace=False))
        confs[r] = float(np.mean(match[picked[:k]]))
    return float(
        (target_confidence - confs.mean()) / (confs.std() + _CALIB_STD_FLOOR)
    )


class ConfScorer:
    def __init__(self, population: Dataset, index: NeighborIndex, k: int,
                 neighborhood: int = 100, calibrated: bool = False,
                 reference_models: int = 16):
        self.index = index
        self.k = k
        self.neighborhood = neighborhood
        self.calibrated = calibrated
        self.reference_models = reference_models

    def score(self, point: EvalPoint, rng) -> float:
        return conf_score(
            point.vector, point.label, point.target_confidence, self.index,
            self.k, self.neighborhood, self.calibrated, self.reference_models,
            rng, exclude_index=point.index,
        )


def make_scorer(name: str, population: Dataset, index: NeighborIndex,
                config: GameConfig):
    if name == "twaka":
        return TWakaScorer(population, index, config.k, config.neighborhood)
    if name == "lira":
        return LiraScorer(population, config.k, config.shadows, config.metric)
    if name == "conf":
        return ConfScorer(population, index, config.k, config.neighborhood,
                          calibrated=False, reference_models=config.shadows)
    if name == "conf_calib":
        return ConfScorer(population, index, config.k, config.neighborhood,
                          calibrated=True, reference_models=config.shadows)
    raise ValueError(f"unknown scorer {name!r}; expected one of {SCORERS}")


def _split_population(population: Dataset, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(population.n)
    half = population.n // 2
    return perm[:half], perm[half:]


def _target_model(population: Dataset, in_idx: np.ndarray, metric: str):
    half_ds = population.subset(in_idx)
    return half_ds, build_index(half_ds, metric=metric)


def _observe(population, half_ds, half_index, point_idx, k):
    vec = population.points[point_idx]
    label = int(population.labels[point_idx])
    order = half_index.query_sorted(vec, horizon=k)
    loss = knn_loss(order, half_ds.labels, label, k)
    return EvalPoint(
        index=int(point_idx), vector=vec, label=label,
        target_loss=loss, target_confidence=1.0 - loss,
    )


def play_security_game(
    population: Dataset,
    config: GameConfig,
    game_seed: int,
    scorer=None,
    index: NeighborIndex | None = None,
) -> GameResult:
    """One challenger/adversary round with a balanced evaluation draw.

    The population is split in half by the seeded generator, the in-half is
    the target model (members may be their own nearest neighbor), and
    ``eval_points/2`` members plus as many non-members are drawn without
    replacement and scored.
    """
    e = config.eval_points
    half = population.n // 2
    if half < e // 2 or population.n - half < e // 2:
        raise ValueError(
            f"population of {population.n} cannot supply {e} balanced eval points"
        )
    rng = np.random.default_rng(game_seed)
    in_idx, out_idx = _split_population(population, rng)
    half_ds, half_index = _target_model(population, in_idx, config.metric)
    members = rng.choice(in_idx, size=e // 2, replace=False)
    nonmembers = rng.choice(out_idx, size=e // 2, replace=False)

    if scorer is None:
        if index is None:
            index = build_index(population, metric=config.metric)
        scorer = make_scorer(config.scorer, population, index, config)

    ids = np.concatenate([members, nonmembers])
    membership = np.concatenate([np.ones(e // 2, bool), np.zeros(e // 2, bool)])
    scores = np.empty(e)
    losses = np.empty(e)
    for pos, point_idx in enumerate(ids):
        point = _observe(population, half_ds, half_index, point_idx, config.k)
        losses[pos] = point.target_loss
        scores[pos] = scorer.score(point, rng)
    return GameResult(
        point_ids=ids, membership=membership, scores=scores,
        target_losses=losses, game_seed=game_seed,
    )


def _game_worker(args) -> GameResult:
    population, config, seed = args
    return play_security_game(population, config, seed)


def run_games(
    population: Dataset,
    config: GameConfig,
    scorer=None,
    index: NeighborIndex | None = None,
    workers: int = 1,
) -> list[GameResult]:
    """All configured games in seed order.

    Games are independent; with ``workers > 1`` they run in a process pool.
    Each game is a pure function of (population, config, seed) and results
    are assembled in seed order, so the output does not depend on workers.
    """
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(population, config, seed) for seed in config.seed_list]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_game_worker, jobs))
    if scorer is None:
        if index is None:
            index = build_index(population, metric=config.metric)
        scorer = make_scorer(config.scorer, population, index, config)
    return [
        play_security_game(population, config, seed, scorer=scorer)
        for seed in config.seed_list
    ]


@dataclass
class PerPointAsr:
    """Per-point attack success plus the raw per-game transcripts."""

    point_ids: np.ndarray
    asr: np.ndarray
    game_scores: np.ndarray      # (games, points)
    game_membership: np.ndarray  # (games, points)

    def as_dict(self) -> dict[int, float]:
        return {int(p): float(a) for p, a in zip(self.point_ids, self.asr)}

    def game_auc(self, game: int) -> float:
        return roc_metrics(self.game_scores[game], self.game_membership[game]).auc

    def mean_auc(self) -> float:
        return float(np.mean([self.game_auc(g) for g in range(self.game_scores.shape[0])]))


def _asr_single_game(
    population: Dataset, config: GameConfig, seed: int, points: np.ndarray,
    scorer=None, index: NeighborIndex | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    if scorer is None:
        if index is None:
            index = build_index(population, metric=config.metric)
        scorer = make_scorer(config.scorer, population, index, config)
    rng = np.random.default_rng(seed)
    in_idx, _ = _split_population(population, rng)
    half_ds, half_index = _target_model(population, in_idx, config.metric)
    in_set = np.zeros(population.n, dtype=bool)
    in_set[in_idx] = True
    scores = np.empty(points.shape[0])
    for pos, point_idx in enumerate(points):
        point = _observe(population, half_ds, half_index, point_idx, config.k)
        scores[pos] = scorer.score(point, rng)
    return scores, in_set[points]


def _asr_game_worker(args) -> tuple[np.ndarray, np.ndarray]:
    population, config, seed, points = args
    return _asr_single_game(population, config, seed, points)


def per_point_asr(
    population: Dataset,
    config: GameConfig,
    points=None,
    scorer=None,
    index: NeighborIndex | None = None,
    workers: int = 1,
) -> PerPointAsr:
    """Fraction of games in which the attack decides each point correctly.

    Every tracked point is evaluated in every game: its membership is set by
    the game's half split, and the decision rule is ``score > 0``.
    """
    if config.games < 2:
        raise ValueError("per-point attack success needs at least 2 games")
    if points is None:
        points = np.arange(population.n)
    points = np.asarray(points, dtype=np.int64)

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(population, config, seed, points) for seed in config.seed_list]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_game = list(pool.map(_asr_game_worker, jobs))
    else:
        if scorer is None:
            if index is None:
                index = build_index(population, metric=config.metric)
            scorer = make_scorer(config.scorer, population, index, config)
        per_game = [
            _asr_single_game(population, config, seed, points, scorer=scorer)
            for seed in config.seed_list
        ]
    game_scores = np.stack([g[0] for g in per_game])
    game_membership = np.stack([g[1] for g in per_game])
    decisions = game_scores > 0
    correct = decisions == game_membership
    return PerPointAsr(
        point_ids=points,
        asr=correct.mean(axis=0),
        game_scores=game_scores,
        game_membership=game_membership,
    )


def write_game_results_csv(results: list[GameResult], path) -> None:
    """Serialize game transcripts as ``game,point_id,member,score,target_loss``."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["game", "point_id", "member", "score", "target_loss"])
        for g, result in enumerate(results):
            for pid, member, score, loss in zip(
                result.point_ids, result.membership, result.scores,
                result.target_losses,
            ):
                writer.writerow(
                    [g, int(pid), int(member), repr(float(score)), repr(float(loss))]
                )
