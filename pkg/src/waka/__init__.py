"""Wasserstein k-NN attribution, exact k-NN Shapley values, and
membership-inference auditing for k-NN classifiers."""

from .attribution import (
    AttributionReport,
    ContributionHistogram,
    ContributionStore,
    WakaParams,
    aggregate_test,
    build_contribution_store,
    loo,
    marginal_contributions,
    self_attribution,
    score_dataset,
    shapley_knn,
    t_waka,
    waka,
    waka_add,
    waka_influence,
    waka_rem,
)
from .datasets import Dataset, generate_synthetic, load_dataset, save_dataset
from .errors import ParseError, ValidationError
from .knn import LossSpec, knn_loss, knn_predict_confidence, knn_utility, subset_loss
from .neighbors import NeighborIndex, NeighborOrder, build_index, query_sorted
from .oracle import PmfPair, brute_shapley, enumerate_pmfs

__version__ = "0.1.0"

__all__ = [
    "AttributionReport",
    "ContributionHistogram",
    "ContributionStore",
    "Dataset",
    "LossSpec",
    "NeighborIndex",
    "NeighborOrder",
    "ParseError",
    "PmfPair",
    "ValidationError",
    "WakaParams",
    "aggregate_test",
    "brute_shapley",
    "build_contribution_store",
    "build_index",
    "enumerate_pmfs",
    "generate_synthetic",
    "knn_loss",
    "knn_predict_confidence",
    "knn_utility",
    "load_dataset",
    "loo",
    "marginal_contributions",
    "query_sorted",
    "save_dataset",
    "score_dataset",
    "self_attribution",
    "shapley_knn",
    "subset_loss",
    "t_waka",
    "waka",
    "waka_add",
    "waka_influence",
    "waka_rem",
    "__version__",
]
