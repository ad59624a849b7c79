"""Command-line interface: run, sweep, validate, partition, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import FedsimError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="TOML config path")
    run.add_argument("--seed", type=int, default=None,
                     help="override experiment.master_seed")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--jobs", type=int, default=None,
                     help="parallel clients per round (FEDSIM_JOBS overrides)")
    run.add_argument("--no-figures", action="store_true",
                     help="skip PNG rendering")

    part = sub.add_parser("partition", help="inspect the federated partition")
    part.add_argument("--config", required=True)
    part.add_argument("--inspect", action="store_true",
                      help="print per-shard label histograms")

    sweep = sub.add_parser("sweep", help="run a grid over one config key")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True,
                       help="dotted key, e.g. client.lambda0")
    sweep.add_argument("--values", required=True,
                       help="comma-separated values")
    sweep.add_argument("--out", default=None, help="output root directory")
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--jobs", type=int, default=None)

    val = sub.add_parser("validate", help="schema-check a config file")
    val.add_argument("--config", required=True)

    rep = sub.add_parser("report", help="render figures from a metrics CSV")
    rep.add_argument("--metrics", required=True, help="metrics.csv path")
    rep.add_argument("--out", default=None,
                     help="figure directory (default: CSV's directory)")
    rep.add_argument("--title", default="")
    return parser


def cmd_run(args) -> int:
    from .runner import run_experiment

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path("runs") / (cfg.name or cfg.strategy)
    summary = run_experiment(cfg, out, seed=args.seed, jobs=args.jobs,
                             render_figures=not args.no_figures)
    final = summary["final"]
    print(f"wrote {summary['metrics_csv']}")
    if final:
        print(f"final round {final['round_idx']}: "
              f"global_acc={final['global_acc']:.4f} "
              f"local_acc={final['local_acc_mean']:.4f} "
              f"sparsity={final['sparsity_pct']:.2f}% "
              f"bytes(up+down)={final['bytes_up_cum'] + final['bytes_down_cum']}")
    return 0


def cmd_partition(args) -> int:
    from .runner import build_dataset, build_shards

    cfg = load_config(args.config)
    dataset = build_dataset(cfg)
    shards = build_shards(cfg, dataset)
    print(f"{len(shards)} shards over {len(dataset.labels)} examples "
          f"({dataset.num_classes} classes)")
    if args.inspect:
        width = len(str(max(s.size for s in shards)))
        for s in shards:
            hist = " ".join(f"{c:4d}" for c in s.label_histogram)
            print(f"shard {s.shard_id:3d}  size {s.size:{width}d}  [{hist}]")
    return 0


def cmd_sweep(args) -> int:
    from .runner import run_sweep

    cfg = load_config(args.config)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise FedsimError("sweep needs at least one value")
    out = Path(args.out) if args.out else Path("runs") / "sweep"
    summaries = run_sweep(cfg, args.param, values, out, seed=args.seed,
                          jobs=args.jobs)
    for value, summary in zip(values, summaries):
        final = summary["final"]
        print(f"{args.param}={value}: global_acc={final['global_acc']:.4f} "
              f"sparsity={final['sparsity_pct']:.2f}% "
              f"-> {summary['metrics_csv']}")
    return 0


def cmd_validate(args) -> int:
    load_config(args.config)
    print(f"{args.config}: OK")
    return 0


def cmd_report(args) -> int:
    from .figures import render_from_csv

    out = Path(args.out) if args.out else Path(args.metrics).parent
    written = render_from_csv(args.metrics, out, title=args.title)
    for path in written:
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "run": cmd_run,
    "partition": cmd_partition,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FedsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
