"""Reproduction pipelines: minimization curves, privacy correlation, onion study.

Every pipeline is a pure function of its inputs and seed list, emits
plot-ready tables (lists of flat row dicts with fixed headers), and leaves
rendering to callers. Concurrency, when used by callers, cannot change any
output because results are keyed by (method, seed, step) rather than
appended in completion order.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .attribution import WakaParams, build_contribution_store, score_dataset, waka_influence
from .datasets import Dataset
from .knn import knn_predict_confidence
from .mia import GameConfig, PerPointAsr, per_point_asr
from .neighbors import NeighborIndex, build_index

MINIMIZATION_HEADERS = (
    "direction", "method", "tau", "seed", "step", "n_points",
    "accuracy", "macro_f1", "minority_ratio",
)
CORRELATION_HEADERS = ("method", "percentile_bin", "mean_score", "mean_asr")
ONION_HEADERS = ("point_id", "asr_before", "asr_after", "delta_asr", "wakainf")


def metrics(predictions, truth) -> tuple[float, float, dict[int, int]]:
    """Accuracy, macro-F1 and per-class truth counts.

    Macro-F1 averages per-class F1 over every class present in either the
    truth or the predictions; a class with undefined precision or recall
    contributes 0. Classes absent from both are excluded.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predictions.shape != truth.shape or predictions.ndim != 1 or truth.shape[0] == 0:
        raise ValueError("predictions and truth must be equal-length non-empty arrays")
    accuracy = float(np.mean(predictions == truth))
    classes = np.union1d(np.unique(truth), np.unique(predictions))
    f1s = []
    counts: dict[int, int] = {}
    for c in classes:
        tp = int(np.sum((predictions == c) & (truth == c)))
        fp = int(np.sum((predictions == c) & (truth != c)))
        fn = int(np.sum((predictions != c) & (truth == c)))
        counts[int(c)] = tp + fn
        denom_p = tp + fp
        denom_r = tp + fn
        precision = tp / denom_p if denom_p else 0.0
        recall = tp / denom_r if denom_r else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return accuracy, float(np.mean(f1s)), counts


def parse_method_token(token: str) -> tuple[str, str]:
    """Split tokens like ``self-waka`` / ``test-shapley`` into (method, mode).

    Bare method names default to self mode. Hyphens and underscores are
    interchangeable in the method part.
    """
    token = token.strip().lower()
    mode = "self"
    for prefix in ("self-", "self_", "test-", "test_"):
        if token.startswith(prefix):
            mode = prefix[:4]
            token = token[len(prefix):]
            break
    method = token.replace("-", "_")
    if method == "random":
        return "random", mode
    from .attribution import METHODS

    if method not in METHODS:
        raise ValueError(f"unknown attribution method token {token!r}")
    return method, mode


def _rank_descending(scores: np.ndarray) -> np.ndarray:
    """Indices from most to least valuable; ties broken by ascending index."""
    n = scores.shape[0]
    return np.lexsort((np.arange(n), -scores))


def _evaluate_subset(
    train: Dataset, keep: np.ndarray, test: Dataset, k: int, metric: str,
    minority_class: int,
) -> tuple[float, float, float]:
    sub = train.subset(keep)
    index = build_index(sub, metric=metric)
    preds = np.empty(test.n, dtype=np.int64)
    for t in range(test.n):
        order = index.query_sorted(test.points[t], horizon=min(k, sub.n))
        preds[t], _ = knn_predict_confidence(
            order, sub.labels, int(test.labels[t]), min(k, sub.n)
        )
    accuracy, macro_f1, _ = metrics(preds, test.labels)
    minority_ratio = float(np.mean(sub.labels == minority_class))
    return accuracy, macro_f1, minority_ratio


@dataclass
class MinimizationCurve:
    """Metric trajectories for one attribution method plus random baselines."""

    direction: str
    method: str
    tau: float
    steps: np.ndarray
    rows: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def method_values(self, metric_name: str) -> np.ndarray:
        vals = [r[metric_name] for r in self.rows if r["method"] == self.method]
        return np.array(vals)

    def at_step(self, step: float, metric_name: str) -> float:
        for r in self.rows:
            if r["method"] == self.method and math.isclose(r["step"], step):
                return r[metric_name]
        raise KeyError(f"no row for method {self.method} at step {step}")


def run_minimization(
    train: Dataset,
    test: Dataset,
    method: str,
    direction: str,
    k: int,
    steps=None,
    tau: float = 0.5,
    seeds=(0,),
    metric: str = "euclidean",
    horizon: int | None = None,
    mode: str = "test",
    index: NeighborIndex | None = None,
    scores: np.ndarray | None = None,
) -> MinimizationCurve:
    """Metric curves while growing or shrinking the training set by rank.

    Removal drops the lowest-scored points first and re-evaluates the
    classifier on the survivors at each step fraction; addition grows from
    empty in descending score order. A step leaving fewer than ``k`` points
    is skipped with a warning row. Random-ranking baselines run once per
    seed over the same steps.
    """
    if direction not in ("removal", "addition"):
        raise ValueError(f"direction must be 'removal' or 'addition', got {direction!r}")
    if steps is None:
        steps = np.round(np.arange(0.0, 1.0, 0.1), 10) if direction == "removal" else \
            np.round(np.arange(0.1, 1.01, 0.1), 10)
    steps = np.asarray(sorted(float(s) for s in steps))
    if np.any(steps < 0) or np.any(steps > 1):
        raise ValueError("steps must lie in [0, 1]")
    if index is None:
        index = build_index(train, metric=metric)
    params = WakaParams(k=k, tau=tau)
    if scores is None:
        scores = score_dataset(
            train, index, k, method, mode=mode, params=params, test_set=test,
            horizon=horizon,
        )
    ranked = _rank_descending(scores)
    n = train.n
    counts = np.bincount(train.labels)
    minority_class = int(np.argmin(counts))

    curve = MinimizationCurve(
        direction=direction, method=method, tau=tau, steps=steps
    )

    def rows_for(name: str, ordering: np.ndarray, seed) -> None:
        for step in steps:
            moved = math.ceil(step * n)
            keep = ordering[: n - moved] if direction == "removal" else ordering[:moved]
            if keep.shape[0] < k:
                curve.warnings.append(
                    f"{name} step {step}: {keep.shape[0]} points < k={k}, skipped"
                )
                continue
            accuracy, macro_f1, minority_ratio = _evaluate_subset(
                train, np.sort(keep), test, k, metric, minority_class
            )
            curve.rows.append(
                {
                    "direction": direction, "method": name, "tau": tau,
                    "seed": seed, "step": float(step), "n_points": int(keep.shape[0]),
                    "accuracy": accuracy, "macro_f1": macro_f1,
                    "minority_ratio": minority_ratio,
                }
            )

    rows_for(method, ranked, seed="")
    for seed in seeds:
        rng = np.random.default_rng(seed)
        rows_for("random", rng.permutation(n), seed=int(seed))
    return curve


def run_tau_sweep(
    train: Dataset,
    test: Dataset,
    k: int,
    tau_values,
    seeds=(0,),
    steps=None,
    metric: str = "euclidean",
    horizon: int | None = None,
) -> tuple[list[MinimizationCurve], list[str]]:
    """Removal and addition curves for both threshold-sensitive score variants
    across a grid of tau values. Duplicate taus are dropped with a warning."""
    notes: list[str] = []
    seen: list[float] = []
    for t in tau_values:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"tau {t} outside [0, 1]")
        if any(math.isclose(t, s) for s in seen):
            notes.append(f"duplicate tau {t} dropped")
            continue
        seen.append(t)
    index = build_index(train, metric=metric)
    curves = []
    for t in seen:
        curves.append(
            run_minimization(
                train, test, "waka_rem", "removal", k, steps=steps, tau=t,
                seeds=seeds, metric=metric, horizon=horizon, index=index,
            )
        )
        curves.append(
            run_minimization(
                train, test, "waka_add", "addition", k, steps=steps, tau=t,
                seeds=seeds, metric=metric, horizon=horizon, index=index,
            )
        )
    return curves, notes


def minimization_table(curves) -> list[dict]:
    if isinstance(curves, MinimizationCurve):
        curves = [curves]
    rows = []
    for curve in curves:
        rows.extend(curve.rows)
    return rows


def rank_correlation(scores, asr) -> tuple[float, float]:
    """Spearman coefficient and two-sided p-value of attribution vs attack risk.

    A constant attribution vector has no rank order to correlate and is
    rejected.
    """
    scores = np.asarray(scores, dtype=np.float64)
    asr = np.asarray(asr, dtype=np.float64)
    if scores.shape != asr.shape or scores.ndim != 1:
        raise ValueError("scores and asr must be equal-length 1-d arrays")
    if np.all(scores == scores[0]):
        raise ValueError("attribution is constant; rank correlation undefined")
    rho, p = stats.spearmanr(scores, asr)
    return float(rho), float(p)


@dataclass
class CorrelationReport:
    """Percentile table plus rank correlations of attribution against attack risk."""

    table: list[dict]
    spearman: dict[str, tuple[float, float]]
    pairwise: dict[tuple[str, str], tuple[float, float]]
    asr: PerPointAsr
    scores: dict[str, np.ndarray]


def run_privacy_correlation(
    population: Dataset,
    k: int,
    config: GameConfig,
    methods=("self-waka", "self-shapley"),
    n_bins: int = 20,
    metric: str = "euclidean",
    horizon: int | None = None,
) -> CorrelationReport:
    """Per-point attack success versus attribution percentiles.

    Points are binned into ``n_bins`` equal-count percentile bins of each
    method's score; the table reports mean attack success per bin, and
    Spearman coefficients (with two-sided p-values) quantify the overall
    rank agreement.
    """
    if config.games < 8:
        raise ValueError("privacy correlation needs at least 8 games")
    index = build_index(population, metric=metric)
    asr = per_point_asr(population, config, index=index)

    score_map: dict[str, np.ndarray] = {}
    for token in methods:
        method, mode = parse_method_token(token)
        if method == "random":
            raise ValueError("random is not an attribution method for correlation")
        scores = score_dataset(
            population, index, k, method, mode=mode,
            params=WakaParams(k=k), test_set=None if mode == "self" else population,
            horizon=horizon,
        )
        if np.all(scores == scores[0]):
            raise ValueError(
                f"attribution {token} is constant; rank correlation undefined"
            )
        score_map[token] = scores

    table: list[dict] = []
    spearman: dict[str, tuple[float, float]] = {}
    for token, scores in score_map.items():
        spearman[token] = rank_correlation(scores, asr.asr)
        order = _rank_descending(scores)[::-1]  # ascending score
        for b, chunk in enumerate(np.array_split(order, n_bins)):
            table.append(
                {
                    "method": token,
                    "percentile_bin": b + 1,
                    "mean_score": float(np.mean(scores[chunk])),
                    "mean_asr": float(np.mean(asr.asr[chunk])),
                }
            )
    pairwise: dict[tuple[str, str], tuple[float, float]] = {}
    tokens = list(score_map)
    for a in range(len(tokens)):
        for b in range(a + 1, len(tokens)):
            rho, p = stats.spearmanr(score_map[tokens[a]], score_map[tokens[b]])
            pairwise[(tokens[a], tokens[b])] = (float(rho), float(p))
    return CorrelationReport(
        table=table, spearman=spearman, pairwise=pairwise, asr=asr, scores=score_map
    )


@dataclass
class OnionReport:
    """Before/after privacy risk around a ranked removal."""

    removal_fraction: float
    removed_ids: np.ndarray
    survivor_ids: np.ndarray
    asr_before_full: np.ndarray   # aligned with the full population
    asr_before: np.ndarray        # aligned with survivor_ids
    asr_after: np.ndarray         # aligned with survivor_ids
    wakainf: np.ndarray           # aligned with survivor_ids
    auc_before: float
    auc_after: float

    @property
    def delta_asr(self) -> np.ndarray:
        return self.asr_after - self.asr_before

    def table(self) -> list[dict]:
        rows = []
        for pid, before, after, inf in zip(
            self.survivor_ids, self.asr_before, self.asr_after, self.wakainf
        ):
            rows.append(
                {
                    "point_id": int(pid), "asr_before": float(before),
                    "asr_after": float(after),
                    "delta_asr": float(after - before), "wakainf": float(inf),
                }
            )
        return rows


def run_onion(
    population: Dataset,
    config: GameConfig,
    removal_fraction: float = 0.10,
    ranking_method: str = "self-waka",
    metric: str = "euclidean",
    horizon: int | None = None,
) -> OnionReport:
    """Remove the top-ranked fraction, then re-measure per-point attack risk.

    Computes baseline per-point attack success and mean game AUC, removes the
    ``ceil(fraction * N)`` highest-ranked points (ties by index), re-runs the
    games on the survivors, and attaches each survivor's stored-contribution
    influence of the removed set on its own score.
    """
    if not 0.0 <= removal_fraction <= 0.5:
        raise ValueError(f"removal_fraction must lie in [0, 0.5], got {removal_fraction}")
    index = build_index(population, metric=metric)
    before = per_point_asr(population, config, index=index)

    method, mode = parse_method_token(ranking_method)
    scores = score_dataset(
        population, index, config.k, method, mode=mode,
        params=WakaParams(k=config.k),
        test_set=None if mode == "self" else population, horizon=horizon,
    )
    n = population.n
    n_removed = math.ceil(removal_fraction * n)
    ranked = _rank_descending(scores)
    removed = np.sort(ranked[:n_removed])
    survivors = np.sort(ranked[n_removed:])

    store = build_contribution_store(
        population, index, config.k, horizon=horizon or config.neighborhood
    )
    wakainf = np.array(
        [waka_influence(store, removed, int(z)) for z in survivors]
    )

    reduced = population.subset(survivors)
    after = per_point_asr(reduced, config)
    return OnionReport(
        removal_fraction=removal_fraction,
        removed_ids=population.ids[removed],
        survivor_ids=population.ids[survivors],
        asr_before_full=before.asr,
        asr_before=before.asr[survivors],
        asr_after=after.asr,
        wakainf=wakainf,
        auc_before=before.mean_auc(),
        auc_after=after.mean_auc(),
    )


def spearman_delta_asr(report: OnionReport) -> tuple[float, float]:
    """Rank correlation between per-survivor ASR change and stored influence."""
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        rho, p = stats.spearmanr(report.delta_asr, report.wakainf)
    return float(rho), float(p)
