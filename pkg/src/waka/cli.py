"""Command-line entry point.

Subcommands wire ingestion, attribution, attacks and the experiment
pipelines together with reproducible configuration: every run resolves its
settings from flags, an optional flat JSON config file and defaults (in that
precedence), echoes the fully resolved configuration into a manifest in the
output directory, and derives all randomness from the configured seeds.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .attribution import AttributionReport, WakaParams, marginal_contributions, score_dataset
from .datasets import Dataset, generate_synthetic, load_dataset, save_dataset
from .errors import ValidationError
from .experiments import (
    CORRELATION_HEADERS,
    MINIMIZATION_HEADERS,
    ONION_HEADERS,
    minimization_table,
    parse_method_token,
    run_minimization,
    run_onion,
    run_privacy_correlation,
    spearman_delta_asr,
)
from .mia import GameConfig, roc_metrics, run_games, write_game_results_csv
from .neighbors import build_index
from .oracle import enumerate_pmfs

_COMMON_DEFAULTS = {
    "dataset": None,
    "format": "csv",
    "synthetic": None,
    "n": 2000,
    "minority_fraction": 0.5,
    "noise": 0.45,
    "seed": 0,
    "seed_list": None,
    "k": 1,
    "metric": "euclidean",
    "horizon": 100,
    "tau": 0.5,
    "workers": 0,
    "figures": True,
    "out": None,
    "config": None,
}

_DEFAULTS = {
    "attribute": {**_COMMON_DEFAULTS, "method": "self-waka", "test_dataset": None,
                  "test_format": "csv", "test_fraction": 0.2},
    "minimize": {**_COMMON_DEFAULTS, "method": "waka-rem", "direction": "removal",
                 "steps": None, "test_dataset": None, "test_format": "csv",
                 "test_fraction": 0.2},
    "attack": {**_COMMON_DEFAULTS, "scorer": "twaka", "games": 48, "shadows": 16,
               "eval_points": 100, "neighborhood": 100,
               "fpr_levels": "0.01,0.05,0.1"},
    "audit-onion": {**_COMMON_DEFAULTS, "scorer": "lira", "games": 48, "shadows": 16,
                    "eval_points": 100, "neighborhood": 100,
                    "removal_fraction": 0.1, "ranking_method": "self-waka"},
    "correlate-privacy": {**_COMMON_DEFAULTS, "scorer": "lira", "games": 48,
                          "shadows": 16, "eval_points": 100, "neighborhood": 100,
                          "methods": "self-waka,self-shapley", "bins": 20},
    "oracle-check": {"trials": 200, "max_n": 16, "k": "1,2,3,5", "seed": 11,
                     "out": None, "config": None, "tolerance": 1e-12},
    "synth": {"synthetic": "two-moons", "n": 2000, "minority_fraction": 0.5,
              "noise": 0.45, "seed": 0, "format": "csv", "out": None,
              "config": None},
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_data_flags(p: _Parser) -> None:
    p.add_argument("--dataset", help="path to a labeled dataset file")
    p.add_argument("--format", choices=["csv", "binary"], help="dataset file format")
    p.add_argument("--synthetic", choices=["two-moons", "gaussian-blobs"],
                   help="generate data instead of loading a file")
    p.add_argument("--n", type=int, help="synthetic sample count")
    p.add_argument("--minority-fraction", type=float, dest="minority_fraction")
    p.add_argument("--noise", type=float, help="synthetic noise level")


def _add_common_flags(p: _Parser) -> None:
    p.add_argument("--k", type=int, help="neighbor count")
    p.add_argument("--metric", choices=["euclidean", "cosine"])
    p.add_argument("--horizon", type=int, help="neighborhood truncation length")
    p.add_argument("--tau", type=float, help="decision threshold")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--seed-list", dest="seed_list",
                   help="comma-separated explicit seeds")
    p.add_argument("--workers", type=int, help="worker processes (0 = all cores)")
    p.add_argument("--no-figures", dest="figures", action="store_const", const=False,
                   help="skip figure rendering")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="flat JSON config file (flags take precedence)")


def _add_game_flags(p: _Parser) -> None:
    p.add_argument("--scorer", choices=["twaka", "lira", "conf", "conf-calib"])
    p.add_argument("--games", type=int)
    p.add_argument("--shadows", type=int)
    p.add_argument("--eval-points", type=int, dest="eval_points")
    p.add_argument("--neighborhood", type=int)


def _build_parser() -> _Parser:
    parser = _Parser(prog="waka", description=__doc__)
    parser.add_argument("--version", action="version", version=f"waka {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("attribute",
                       help="score training points with one attribution method")
    _add_data_flags(p)
    _add_common_flags(p)
    p.add_argument("--method", help="e.g. self-waka, test-shapley, waka-rem")
    p.add_argument("--test-dataset", dest="test_dataset",
                   help="test set for test-aggregated methods")
    p.add_argument("--test-format", dest="test_format", choices=["csv", "binary"])
    p.add_argument("--test-fraction", dest="test_fraction", type=float,
                   help="synthetic test-set size relative to --n")

    p = sub.add_parser("minimize",
                       help="data removal/addition curves for one method")
    _add_data_flags(p)
    _add_common_flags(p)
    p.add_argument("--method")
    p.add_argument("--direction", choices=["removal", "addition"])
    p.add_argument("--steps", help="comma-separated step fractions")
    p.add_argument("--test-dataset", dest="test_dataset")
    p.add_argument("--test-format", dest="test_format", choices=["csv", "binary"])
    p.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = sub.add_parser("attack",
                       help="run security games with one attack scorer")
    _add_data_flags(p)
    _add_common_flags(p)
    _add_game_flags(p)
    p.add_argument("--fpr-levels", dest="fpr_levels",
                   help="comma-separated FPR levels for TPR reporting")

    p = sub.add_parser("audit-onion",
                       help="remove top-ranked points and re-measure attack risk")
    _add_data_flags(p)
    _add_common_flags(p)
    _add_game_flags(p)
    p.add_argument("--removal-fraction", dest="removal_fraction", type=float)
    p.add_argument("--ranking-method", dest="ranking_method")

    p = sub.add_parser("correlate-privacy",
                       help="attribution percentiles vs per-point attack success")
    _add_data_flags(p)
    _add_common_flags(p)
    _add_game_flags(p)
    p.add_argument("--methods", help="comma-separated attribution tokens")
    p.add_argument("--bins", type=int, help="percentile bin count")

    p = sub.add_parser("oracle-check",
                       help="verify exact counting against subset enumeration")
    p.add_argument("--trials", type=int)
    p.add_argument("--max-n", dest="max_n", type=int)
    p.add_argument("--k", help="comma-separated neighbor counts")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--out", help="optional output directory for the report")
    p.add_argument("--config", help="flat JSON config file")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--synthetic", choices=["two-moons", "gaussian-blobs"],
                   dest="synthetic")
    p.add_argument("--n", type=int)
    p.add_argument("--minority-fraction", dest="minority_fraction", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["csv", "binary"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="flat JSON config file")
    return parser


def _resolve(args: argparse.Namespace, command: str) -> dict:
    """Merge flag values over config-file values over defaults."""
    cfg = dict(_DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        with open(path, "r", encoding="utf-8") as handle:
            file_cfg = json.load(handle)
        if not isinstance(file_cfg, dict):
            raise ValidationError("config file must hold a flat JSON object")
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise ValidationError(f"unknown config key {key!r} for {command}")
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _parse_int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(tok) for tok in str(text).split(",") if tok.strip()]


def _parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _dataset_from_cfg(cfg: dict) -> Dataset:
    if cfg.get("dataset"):
        return load_dataset(cfg["dataset"], "raw-binary" if cfg["format"] == "binary" else "csv")
    if cfg.get("synthetic"):
        return generate_synthetic(
            cfg["synthetic"], cfg["n"], cfg["minority_fraction"], cfg["noise"],
            cfg["seed"],
        )
    raise ValidationError("provide either --dataset or --synthetic")


def _test_set_from_cfg(cfg: dict) -> Dataset | None:
    if cfg.get("test_dataset"):
        return load_dataset(
            cfg["test_dataset"],
            "raw-binary" if cfg.get("test_format") == "binary" else "csv",
        )
    if cfg.get("synthetic"):
        n_test = max(4, int(round(cfg["test_fraction"] * cfg["n"])))
        return generate_synthetic(
            cfg["synthetic"], n_test, cfg["minority_fraction"], cfg["noise"],
            cfg["seed"] + 1_000_003,
        )
    return None


def _seed_list(cfg: dict, count: int) -> list[int]:
    if cfg.get("seed_list"):
        seeds = _parse_int_list(cfg["seed_list"])
        if len(seeds) != count:
            raise ValidationError(f"--seed-list needs {count} seeds, got {len(seeds)}")
        return seeds
    return [cfg["seed"] + i for i in range(count)]


def _workers(cfg: dict) -> int:
    w = int(cfg.get("workers") or 0)
    return os.cpu_count() or 1 if w <= 0 else w


def _out_dir(cfg: dict) -> str:
    out = cfg.get("out")
    if not out:
        raise ValidationError("--out is required for this command")
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, command, cfg, outputs, wall, extra=None) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(cfg.items())},
        "outputs": outputs,
        "version": __version__,
        "wall_clock_s": round(wall, 3),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=str)
        handle.write("\n")


def _write_rows_csv(path, headers, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(headers)
        for row in rows:
            writer.writerow(
                [repr(row[h]) if isinstance(row[h], float) else row[h] for h in headers]
            )


def _game_config(cfg: dict) -> GameConfig:
    games = int(cfg["games"])
    return GameConfig(
        k=int(cfg["k"]),
        games=games,
        shadows=int(cfg["shadows"]),
        eval_points=int(cfg["eval_points"]),
        neighborhood=int(cfg["neighborhood"]),
        seed_list=_seed_list(cfg, games),
        scorer=str(cfg["scorer"]).replace("-", "_"),
        metric=cfg["metric"],
    )


def _cmd_attribute(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    data = _dataset_from_cfg(cfg)
    method, mode = parse_method_token(cfg["method"])
    if method == "random":
        raise ValidationError("random is a baseline, not an attribution method")
    index = build_index(data, metric=cfg["metric"])
    test = _test_set_from_cfg(cfg) if mode == "test" else None
    if mode == "test" and test is None:
        raise ValidationError("test-aggregated methods need --test-dataset")
    params = WakaParams(k=cfg["k"], tau=cfg["tau"])
    scores = score_dataset(
        data, index, cfg["k"], method, mode=mode, params=params,
        test_set=test, horizon=cfg["horizon"],
    )
    report = AttributionReport(
        method=method, mode=mode, scores=scores, point_ids=data.ids,
        config={
            "k": cfg["k"], "metric": cfg["metric"], "horizon": cfg["horizon"],
            "tau": cfg["tau"], "seed": cfg["seed"],
        },
    )
    report.write(os.path.join(out, "scores.csv"), os.path.join(out, "scores.json"))
    outputs = ["scores.csv", "scores.json"]
    if cfg["figures"]:
        from . import plots

        plots.plot_score_distribution(
            scores, os.path.join(out, "scores.png"),
            title=f"{cfg['method']} (k={cfg['k']})",
        )
        outputs.append("scores.png")
    _write_manifest(out, "attribute", cfg, outputs, time.perf_counter() - t0)
    return 0


def _cmd_minimize(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    data = _dataset_from_cfg(cfg)
    test = _test_set_from_cfg(cfg)
    if test is None:
        raise ValidationError("minimize needs --test-dataset (or synthetic data)")
    method, mode = parse_method_token(cfg["method"])
    steps = _parse_float_list(cfg["steps"]) if cfg.get("steps") else None
    seeds = _seed_list(cfg, 5) if not cfg.get("seed_list") else _parse_int_list(cfg["seed_list"])
    curve = run_minimization(
        data, test, method, cfg["direction"], cfg["k"], steps=steps,
        tau=cfg["tau"], seeds=seeds, metric=cfg["metric"],
        horizon=cfg["horizon"], mode=mode,
    )
    rows = minimization_table(curve)
    _write_rows_csv(os.path.join(out, "curves.csv"), MINIMIZATION_HEADERS, rows)
    outputs = ["curves.csv"]
    if cfg["figures"]:
        from . import plots

        for metric_name in ("accuracy", "macro_f1", "minority_ratio"):
            name = f"{metric_name}.png"
            plots.plot_minimization(rows, metric_name, os.path.join(out, name))
            outputs.append(name)
    _write_manifest(
        out, "minimize", cfg, outputs, time.perf_counter() - t0,
        extra={"warnings": curve.warnings, "seeds": seeds},
    )
    return 0


def _cmd_attack(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    population = _dataset_from_cfg(cfg)
    game_cfg = _game_config(cfg)
    fpr_levels = _parse_float_list(cfg["fpr_levels"])
    t_score = time.perf_counter()
    results = run_games(population, game_cfg, workers=_workers(cfg))
    scoring_seconds = time.perf_counter() - t_score
    summaries = [
        roc_metrics(r.scores, r.membership, fpr_levels=fpr_levels) for r in results
    ]
    write_game_results_csv(results, os.path.join(out, "games.csv"))
    roc = {
        "auc": float(np.mean([s.auc for s in summaries])),
        "tpr_at_fpr": {
            repr(level): float(np.mean([s.tpr_at_fpr[level] for s in summaries]))
            for level in fpr_levels
        },
        "threshold_accuracy": float(np.mean([s.threshold_accuracy for s in summaries])),
        "per_game_auc": [s.auc for s in summaries],
    }
    with open(os.path.join(out, "roc.json"), "w", encoding="utf-8") as handle:
        json.dump(roc, handle, indent=2, sort_keys=True)
        handle.write("\n")
    outputs = ["games.csv", "roc.json"]
    if cfg["figures"]:
        from . import plots

        plots.plot_roc(results, os.path.join(out, "roc.png"),
                       title=f"{cfg['scorer']} (k={cfg['k']})")
        outputs.append("roc.png")
    _write_manifest(
        out, "attack", cfg, outputs, time.perf_counter() - t0,
        extra={"scoring_seconds": round(scoring_seconds, 3),
               "seeds": game_cfg.seed_list},
    )
    return 0


def _cmd_audit_onion(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    population = _dataset_from_cfg(cfg)
    game_cfg = _game_config(cfg)
    report = run_onion(
        population, game_cfg, removal_fraction=cfg["removal_fraction"],
        ranking_method=cfg["ranking_method"], metric=cfg["metric"],
        horizon=cfg["horizon"],
    )
    rho, p = spearman_delta_asr(report)
    _write_rows_csv(os.path.join(out, "onion.csv"), ONION_HEADERS, report.table())
    summary = {
        "removal_fraction": report.removal_fraction,
        "removed_points": int(report.removed_ids.shape[0]),
        "auc_before": report.auc_before,
        "auc_after": report.auc_after,
        "high_asr_before": int(np.sum(report.asr_before >= 0.95)),
        "high_asr_after": int(np.sum(report.asr_after >= 0.95)),
        "spearman_delta_asr_vs_influence": {"rho": rho, "p_value": p},
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
        handle.write("\n")
    outputs = ["onion.csv", "summary.json"]
    if cfg["figures"]:
        from . import plots

        plots.plot_asr_histograms(
            report.asr_before_full, report.asr_after, os.path.join(out, "asr_hist.png")
        )
        plots.plot_influence_scatter(
            report.wakainf, report.delta_asr, os.path.join(out, "influence.png")
        )
        outputs.extend(["asr_hist.png", "influence.png"])
    _write_manifest(out, "audit-onion", cfg, outputs, time.perf_counter() - t0,
                    extra={"seeds": game_cfg.seed_list})
    return 0


def _cmd_correlate(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    population = _dataset_from_cfg(cfg)
    game_cfg = _game_config(cfg)
    methods = [tok.strip() for tok in str(cfg["methods"]).split(",") if tok.strip()]
    report = run_privacy_correlation(
        population, cfg["k"], game_cfg, methods=methods, n_bins=int(cfg["bins"]),
        metric=cfg["metric"], horizon=cfg["horizon"],
    )
    _write_rows_csv(
        os.path.join(out, "correlation.csv"), CORRELATION_HEADERS, report.table
    )
    spearman = {
        "vs_asr": {m: {"rho": v[0], "p_value": v[1]} for m, v in report.spearman.items()},
        "pairwise": {
            " / ".join(pair): {"rho": v[0], "p_value": v[1]}
            for pair, v in report.pairwise.items()
        },
    }
    with open(os.path.join(out, "spearman.json"), "w", encoding="utf-8") as handle:
        json.dump(spearman, handle, indent=2, sort_keys=True)
        handle.write("\n")
    outputs = ["correlation.csv", "spearman.json"]
    if cfg["figures"]:
        from . import plots

        plots.plot_correlation(report.table, os.path.join(out, "correlation.png"))
        outputs.append("correlation.png")
    _write_manifest(out, "correlate-privacy", cfg, outputs, time.perf_counter() - t0,
                    extra={"seeds": game_cfg.seed_list})
    return 0


def _cmd_oracle_check(cfg: dict) -> int:
    t0 = time.perf_counter()
    rng = np.random.default_rng(int(cfg["seed"]))
    ks = _parse_int_list(cfg["k"])
    trials = int(cfg["trials"])
    max_n = int(cfg["max_n"])
    tolerance = float(cfg["tolerance"])
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(8, max_n + 1))
        k = int(rng.choice([kk for kk in ks if kk <= n - 2]))
        dim = int(rng.integers(1, 5))
        points = rng.normal(size=(n, dim))
        n_classes = int(rng.integers(2, 4))
        raw = rng.integers(0, n_classes, size=n)
        _, labels = np.unique(raw, return_inverse=True)
        data = Dataset(points=points, labels=labels)
        index = build_index(data)
        query = rng.normal(size=dim)
        y_t = int(rng.integers(0, labels.max() + 1))
        i = int(rng.integers(0, n))
        order = index.query_sorted(query, horizon=n)
        rank = int(np.nonzero(order.ranked == i)[0][0])
        hist = marginal_contributions(order, data.labels, rank, y_t, k)
        pair = enumerate_pmfs(data, i, query, y_t, k)
        worst = max(worst, float(np.max(np.abs(hist.bins - pair.difference))))
    ok = worst <= tolerance
    wall = time.perf_counter() - t0
    line = (
        f"oracle-check: {trials} trials, max per-bin deviation {worst:.3e} "
        f"({'<=' if ok else '>'} {tolerance:g}), {wall:.1f}s"
    )
    print(line)
    if cfg.get("out"):
        out = _out_dir(cfg)
        with open(os.path.join(out, "oracle_report.json"), "w", encoding="utf-8") as handle:
            json.dump(
                {"trials": trials, "max_n": max_n, "k": ks, "seed": cfg["seed"],
                 "max_deviation": worst, "tolerance": tolerance, "passed": ok},
                handle, indent=2, sort_keys=True,
            )
            handle.write("\n")
        _write_manifest(out, "oracle-check", cfg, ["oracle_report.json"], wall)
    return 0 if ok else 1


def _cmd_synth(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    data = generate_synthetic(
        cfg["synthetic"], int(cfg["n"]), float(cfg["minority_fraction"]),
        float(cfg["noise"]), int(cfg["seed"]),
    )
    ext = "csv" if cfg["format"] == "csv" else "bin"
    name = f"dataset.{ext}"
    save_dataset(data, os.path.join(out, name),
                 "csv" if cfg["format"] == "csv" else "raw-binary")
    _write_manifest(out, "synth", cfg, [name], time.perf_counter() - t0)
    return 0


_COMMANDS = {
    "attribute": _cmd_attribute,
    "minimize": _cmd_minimize,
    "attack": _cmd_attack,
    "audit-onion": _cmd_audit_onion,
    "correlate-privacy": _cmd_correlate,
    "oracle-check": _cmd_oracle_check,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _resolve(args, args.command)
        return _COMMANDS[args.command](cfg)
    except (ValidationError, ValueError) as exc:
        sys.stderr.write(f"waka {args.command}: error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failure
        sys.stderr.write(f"waka {args.command}: failed: {exc!r}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
