"""Command line entry point: ``verlite {train,bench,compare,replay}``.

The log level comes from ``VER_LOG_LEVEL`` (default ``INFO``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from verlite import bench, config
from verlite.config import ConfigError, RunConfig

log = logging.getLogger("verlite")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


def _replica_list(text: str) -> list[int]:
    try:
        values = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"replicas must be comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("replica counts must be >= 1")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verlite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, replicas_help: str = "replica count") -> None:
        p.add_argument("--config", required=True, type=Path, help="TOML run config")
        p.add_argument("--seed", type=_seeds, help="comma-separated seeds (overrides run.seeds)")
        p.add_argument("--regime", choices=bench.REGIMES, help="override run.regime")
        p.add_argument("--replicas", type=_replica_list, help=replicas_help)
        p.add_argument("--virtual-clock", action=argparse.BooleanOptionalAction, default=None,
                       help="simulate latencies on a virtual clock instead of sleeping")
        p.add_argument("--out-dir", type=Path, help="output directory (overrides run.out_dir)")

    common(sub.add_parser("train", help="train one run per seed"))
    common(sub.add_parser("bench", help="throughput table over sync, nover and ver"),
           "extra replica counts for scaling rows, e.g. 1,4")
    common(sub.add_parser("compare", help="return-vs-steps curves per regime"))
    rp = sub.add_parser("replay", help="run a dumped rollout through packing and one update")
    common(rp)
    rp.add_argument("--rollout", required=True, type=Path, help="JSONL rollout dump")
    rp.add_argument("--checkpoint", type=Path, help="start from these parameters")
    return parser


def _load(args: argparse.Namespace) -> tuple[RunConfig, list[int], Path]:
    cfg = config.load(args.config)
    replicas = None
    if args.replicas and args.command != "bench":
        if len(args.replicas) != 1:
            raise ConfigError([f"--replicas: {args.command} takes a single count"])
        replicas = args.replicas[0]
    cfg = bench.with_overrides(cfg, regime=args.regime, replicas=replicas,
                               virtual_clock=args.virtual_clock, seeds=args.seed)
    out = args.out_dir if args.out_dir is not None else Path(cfg.run.out_dir)
    return cfg, list(cfg.run.seeds), out


def cmd_train(args: argparse.Namespace) -> int:
    cfg, seeds, out = _load(args)
    out.mkdir(parents=True, exist_ok=True)
    config.save(cfg, out / "config.toml")
    multi = len(seeds) > 1
    for seed in seeds:
        suffix = f"-s{seed}" if multi else ""
        res = bench.run_training(cfg, seed, out, suffix)
        s = bench.summarize(res.records, cfg.run.warmup_updates)
        log.info("seed %d: %d updates, mean SPS %.0f, final return %.3f, %.1fs",
                 seed, len(res.records), s.mean_sps, s.final_return, res.wall_time)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg, seeds, out = _load(args)
    rows, _ = bench.bench(cfg, seeds, replica_counts=args.replicas or (), out_dir=out)
    print(bench.format_table(rows))
    log.info("wrote %s and %s", out / "bench.csv", out / "env_counts.csv")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg, seeds, out = _load(args)
    regimes = (args.regime,) if args.regime else ("sync", "ver")
    _, runs = bench.compare(cfg, seeds, regimes, out_dir=out)
    optimum = bench.task_optimum(cfg)
    for regime, results in runs.items():
        curve = bench.median_curve(results)
        log.info("%s: median final return %.3f, normalized AUC %.3f", regime, curve[-1],
                 bench.normalized_auc(curve, optimum))
    log.info("wrote %s", out / "curves.csv")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    cfg, seeds, _ = _load(args)
    report = bench.replay(args.rollout, cfg, seeds[0], args.checkpoint)
    print(json.dumps(report, indent=2))
    return 0 if report["round_trip"] else 1


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "compare": cmd_compare, "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("VER_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
