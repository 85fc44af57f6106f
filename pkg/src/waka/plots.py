"""Figure rendering for CLI reports.

The experiment pipelines emit plot-ready tables; this module turns those
tables into PNG files written next to the delimited output. Only the CLI
imports it, so headless library use never touches matplotlib.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIG_KW = {"figsize": (6.0, 4.2), "dpi": 130}


def _finish(fig, ax, path, xlabel, ylabel, title):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_score_distribution(scores, path, title="attribution scores"):
    fig, ax = plt.subplots(**_FIG_KW)
    ax.hist(np.asarray(scores), bins=50, color="#3465a4", alpha=0.85)
    _finish(fig, ax, path, "score", "count", title)


def plot_minimization(rows, metric_name, path, title=None):
    """One line per method over the step grid; random baselines are averaged."""
    fig, ax = plt.subplots(**_FIG_KW)
    methods = sorted({r["method"] for r in rows})
    for method in methods:
        sub = [r for r in rows if r["method"] == method]
        steps = sorted({r["step"] for r in sub})
        means = [
            np.mean([r[metric_name] for r in sub if r["step"] == s]) for s in steps
        ]
        style = {"linestyle": "--", "color": "black"} if method == "random" else {}
        ax.plot(steps, means, marker="o", markersize=3, label=method, **style)
    ax.legend(fontsize=8)
    direction = rows[0]["direction"] if rows else ""
    _finish(
        fig, ax, path, f"fraction {direction or 'moved'}", metric_name,
        title or f"data {direction}: {metric_name}",
    )


def plot_roc(results, path, title="attack ROC (log-log)"):
    """Per-game step ROC curves on log-log axes with the chance diagonal."""
    from .mia import roc_metrics

    fig, ax = plt.subplots(**_FIG_KW)
    floor = 1e-3
    aucs = []
    for result in results:
        scores = result.scores
        member = result.membership
        order = np.argsort(-scores, kind="stable")
        tp = np.cumsum(member[order]) / max(int(member.sum()), 1)
        fp = np.cumsum(~member[order]) / max(int((~member).sum()), 1)
        ax.plot(
            np.clip(fp, floor, None), np.clip(tp, floor, None),
            color="#3465a4", alpha=0.25, linewidth=0.8,
        )
        aucs.append(roc_metrics(scores, member).auc)
    ax.plot([floor, 1], [floor, 1], "k--", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    _finish(
        fig, ax, path, "false positive rate", "true positive rate",
        f"{title}; mean AUC {np.mean(aucs):.3f}",
    )


def plot_asr_histograms(asr_before, asr_after, path, title="per-point attack success"):
    fig, ax = plt.subplots(**_FIG_KW)
    bins = np.linspace(0, 1, 21)
    ax.hist(asr_before, bins=bins, alpha=0.6, label="before removal", color="#3465a4")
    ax.hist(asr_after, bins=bins, alpha=0.6, label="after removal", color="#cc0000")
    ax.legend(fontsize=8)
    _finish(fig, ax, path, "attack success rate", "points", title)


def plot_influence_scatter(wakainf, delta_asr, path, title="influence vs ASR change"):
    fig, ax = plt.subplots(**_FIG_KW)
    ax.scatter(wakainf, delta_asr, s=8, alpha=0.5, color="#3465a4")
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.axvline(0.0, color="black", linewidth=0.6)
    _finish(fig, ax, path, "stored-contribution influence", "ASR change", title)


def plot_correlation(table_rows, path, title="attack success by score percentile"):
    fig, ax = plt.subplots(**_FIG_KW)
    methods = sorted({r["method"] for r in table_rows})
    for method in methods:
        sub = sorted(
            (r for r in table_rows if r["method"] == method),
            key=lambda r: r["percentile_bin"],
        )
        ax.plot(
            [r["percentile_bin"] for r in sub],
            [r["mean_asr"] for r in sub],
            marker="o", markersize=3, label=method,
        )
    ax.legend(fontsize=8)
    _finish(fig, ax, path, "score percentile bin", "mean attack success", title)
