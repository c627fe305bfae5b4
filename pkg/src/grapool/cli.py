"""Command-line entry point: ``grapool run|ablate|summarize|make-synthetic|stats``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import (
    ABLATION_DATASETS,
    ExperimentConfig,
    NoResultsError,
    ablation_matrix,
    aggregate_results,
    emit_tables,
    load_records,
    run_experiment,
)
from .graphio import load_dataset, synthetic_clique_cycle, write_tudataset
from .report import plot_curves, plot_summary
from .training import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NO_DATA = 0, 2, 3

log = logging.getLogger("grapool")


def _train_overrides(args) -> dict:
    out = {}
    for key in ("lr", "batch_size", "max_epochs", "patience"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _report_runs(records) -> int:
    failed = sum(r["result"]["failed"] for r in records)
    print(f"{len(records)} runs executed, {failed} failed")
    return EXIT_OK if not records or failed < len(records) else 1


def cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    overrides = _train_overrides(args)
    if overrides:
        config.train = {**config.train, **overrides}
    if args.out_dir:
        config.out_dir = args.out_dir
    if args.repeats:
        config.repeats = args.repeats
    return _report_runs(run_experiment(config, jobs=args.jobs, force=args.force))


def cmd_ablate(args) -> int:
    datasets = args.datasets.split(",") if args.datasets else list(ABLATION_DATASETS)
    out_root = Path(args.out_dir or f"results/ablation-{args.kind}")
    configs = ablation_matrix(
        args.kind,
        datasets,
        repeats=args.repeats,
        base_seed=args.base_seed,
        train=_train_overrides(args),
        data_dir=args.data,
        out_dir=str(out_root),
    )
    cfg_dir = out_root / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    for cfg in configs:
        (cfg_dir / f"{cfg.datasets[0]}.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    print(f"{len(configs)} experiment configs written to {cfg_dir}")
    if args.dry_run:
        return EXIT_OK
    records = []
    for cfg in configs:
        records += run_experiment(cfg, jobs=args.jobs, force=args.force)
    return _report_runs(records)


def cmd_summarize(args) -> int:
    summary = aggregate_results(args.out_dir)
    formats = ["csv", "markdown"] if args.format == "all" else [args.format]
    paths = emit_tables(summary, args.out_dir, formats)
    if not args.no_figures:
        paths.append(plot_summary(summary, Path(args.out_dir) / "summary.png"))
        paths.append(plot_curves(load_records(args.out_dir), Path(args.out_dir) / "val_curves.png"))
    for r in summary.rows:
        print(f"{r.dataset:16s} {r.pooling:9s} {r.selection or '-':5s} {r.aggregator or '-':9s} "
              f"{r.aux_loss:9s} {r.cell():>13s}  n={r.n_runs} failed={r.n_failed}")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    ds = synthetic_clique_cycle(args.graphs, args.min_nodes, args.max_nodes, args.seed)
    path = write_tudataset(ds, Path(args.out) / ds.name)
    print(f"wrote {len(ds)} graphs to {path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = load_dataset(args.name, args.data)
    s = ds.stats()
    print(
        f"{ds.name}: {s['graphs']} graphs, nodes {s['nodes_mean']:.2f}±{s['nodes_std']:.2f}, "
        f"edges {s['edges_mean']:.2f}±{s['edges_std']:.2f}, F={s['features']}, classes={s['classes']}"
    )
    return EXIT_OK


def _add_train_flags(p) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true", help="rerun runs whose record already exists")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grapool", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--repeats", type=int)
    _add_train_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run one SpaPool ablation grid")
    p.add_argument("--kind", required=True, choices=["selection", "aggregation", "loss"])
    p.add_argument("--data", help="dataset root (default: $GRAPOOL_DATA_DIR)")
    p.add_argument("--datasets", help="comma-separated dataset names")
    p.add_argument("--out-dir")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--base-seed", dest="base_seed", type=int, default=0)
    p.add_argument("--dry-run", action="store_true", help="write configs without running")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("summarize", help="aggregate run records into tables and figures")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["csv", "markdown", "all"], default="all")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("make-synthetic", help="write the clique-vs-cycle dataset in TU format")
    p.add_argument("--out", required=True)
    p.add_argument("--graphs", type=int, default=200)
    p.add_argument("--min-nodes", dest="min_nodes", type=int, default=10)
    p.add_argument("--max-nodes", dest="max_nodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("name")
    p.add_argument("--data")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoResultsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_DATA


if __name__ == "__main__":
    sys.exit(main())
