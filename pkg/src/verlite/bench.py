"""Comparison harness: throughput tables, sample-efficiency curves and rollout replay.

All regimes in one invocation share seeds, and env latencies are drawn from
streams keyed by ``(seed, env, episode)``, so every regime sees the same
latency trace.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from verlite.config import RunConfig
from verlite.distributed import IterationRecord, MetricsSink, ReplicaGroup
from verlite.envsim import make_env, optimal_return
from verlite.learner import EntropyController, update
from verlite.nncore.checkpoint import load_checkpoint
from verlite.nncore.optim import Adam
from verlite.nncore.policy import init_params
from verlite.packseq import pack, split_minibatches, unpack
from verlite.rollout import load_jsonl

log = logging.getLogger(__name__)

REGIMES = ("sync", "nover", "ver")


def with_overrides(cfg: RunConfig, regime: str | None = None, replicas: int | None = None,
                   virtual_clock: bool | None = None, seeds: Sequence[int] | None = None) -> RunConfig:
    """A validated deep copy of ``cfg`` with CLI-style overrides applied."""
    out = copy.deepcopy(cfg)
    if regime is not None:
        out.run.regime = regime
    if replicas is not None:
        out.run.replicas = replicas
    if virtual_clock is not None:
        out.run.virtual_clock = virtual_clock
    if seeds is not None:
        out.run.seeds = list(seeds)
    return out.validate()


# -- single runs -------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    regime: str
    replicas: int
    records: list[IterationRecord]
    rollout_counts: list[list[int]]
    wall_time: float


def run_training(cfg: RunConfig, seed: int, out_dir: str | Path | None = None,
                 suffix: str = "", checkpoint: bool = True) -> RunResult:
    """Train one seed; with ``out_dir`` set, writes JSONL metrics, a checkpoint and a summary."""
    out = Path(out_dir) if out_dir is not None else None
    sink = MetricsSink(out, suffix)
    ckpt = out / f"checkpoint{suffix}.json" if out is not None and checkpoint else None
    dump = out / f"dumps{suffix}" if out is not None and cfg.run.dump_rollouts else None
    t0 = time.perf_counter()
    try:
        with ReplicaGroup(cfg, seed=seed, metrics=sink, checkpoint_path=ckpt, dump_dir=dump) as group:
            records = group.train()
            counts = [list(r.per_env_counts) for r in sink.rollouts]
    finally:
        sink.close()
    result = RunResult(seed, cfg.run.regime, cfg.run.replicas, records, counts, time.perf_counter() - t0)
    if out is not None:
        summary = summarize(records, cfg.run.warmup_updates)
        doc = {"seed": seed, "regime": cfg.run.regime, "replicas": cfg.run.replicas,
               "wall_time": result.wall_time, **asdict(summary)}
        (out / f"summary{suffix}.json").write_text(json.dumps(doc, indent=2))
    return result


@dataclass
class ThroughputSummary:
    updates: int
    steps: int
    mean_sps: float
    max_sps: float
    mean_over_max: float
    mean_collect: float
    mean_learn: float
    rollout_time_cv: float
    final_return: float


def summarize(records: Sequence[IterationRecord], warmup: int = 0) -> ThroughputSummary:
    """Steady-state throughput: mean SPS is pooled steps over pooled window time.

    The first ``warmup`` iterations are skipped (all of them are kept when the
    run is shorter than that). ``rollout_time_cv`` is the across-replica
    coefficient of variation of collection time, averaged over iterations.
    """
    recs = list(records[warmup:]) or list(records)
    if not recs:
        raise ValueError("no iteration records to summarize")
    steps = sum(r.steps for r in recs)
    window = sum(r.window_time for r in recs)
    mean_sps = steps / window if window > 0 else math.inf
    max_sps = max(r.sps for r in recs)
    cvs = []
    for r in recs:
        t = np.asarray(r.rollout_times, dtype=np.float64)
        if t.size > 1 and t.mean() > 0:
            cvs.append(float(t.std() / t.mean()))
    returns = [r.mean_return for r in recs if math.isfinite(r.mean_return)]
    return ThroughputSummary(
        updates=len(recs), steps=steps, mean_sps=mean_sps, max_sps=max_sps,
        mean_over_max=mean_sps / max_sps if max_sps > 0 else math.nan,
        mean_collect=float(np.mean([r.collect_time for r in recs])),
        mean_learn=float(np.mean([r.learn_time for r in recs])),
        rollout_time_cv=float(np.mean(cvs)) if cvs else 0.0,
        final_return=returns[-1] if returns else math.nan)


# -- throughput bench ----------------------------------------------------------------

@dataclass
class BenchRow:
    regime: str
    replicas: int
    seed: str
    updates: int
    steps: int
    mean_sps: float
    max_sps: float
    mean_over_max: float
    speedup_vs_sync: float
    rollout_time_cv: float
    wall_time: float


BENCH_COLUMNS = [f for f in BenchRow.__dataclass_fields__]


def bench(cfg: RunConfig, seeds: Sequence[int], regimes: Sequence[str] = REGIMES,
          replica_counts: Sequence[int] = (), out_dir: str | Path | None = None
          ) -> tuple[list[BenchRow], dict[tuple[str, int], list[RunResult]]]:
    """Run every regime on every seed; ``replica_counts`` adds scaling rows.

    Returns per-seed rows plus one ``seed == "mean"`` row per (regime,
    replicas) whose SPS figures are seed means. Speedups are against the Sync
    row with the same replica count and seed (or the Sync mean).
    """
    counts = sorted({cfg.run.replicas, *replica_counts})
    runs: dict[tuple[str, int], list[RunResult]] = {}
    for reps in counts:
        for regime in regimes:
            c = with_overrides(cfg, regime=regime, replicas=reps)
            for seed in seeds:
                log.info("bench: regime=%s replicas=%d seed=%d", regime, reps, seed)
                runs.setdefault((regime, reps), []).append(run_training(c, seed, checkpoint=False))
    rows = bench_rows(runs, cfg.run.warmup_updates)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_bench_csv(rows, out / "bench.csv")
        write_count_histogram(runs, out / "env_counts.csv")
    return rows, runs


def bench_rows(runs: dict[tuple[str, int], list[RunResult]], warmup: int) -> list[BenchRow]:
    summaries = {key: [summarize(r.records, warmup) for r in rs] for key, rs in runs.items()}
    rows: list[BenchRow] = []
    for (regime, reps), rs in runs.items():
        sums = summaries[(regime, reps)]
        base = summaries.get(("sync", reps))
        for i, (run, s) in enumerate(zip(rs, sums)):
            ref = base[i].mean_sps if base is not None and i < len(base) else math.nan
            rows.append(BenchRow(regime, reps, str(run.seed), s.updates, s.steps, s.mean_sps, s.max_sps,
                                 s.mean_over_max, s.mean_sps / ref, s.rollout_time_cv, run.wall_time))
        mean_sps = float(np.mean([s.mean_sps for s in sums]))
        ref = float(np.mean([s.mean_sps for s in base])) if base else math.nan
        rows.append(BenchRow(regime, reps, "mean", int(np.mean([s.updates for s in sums])),
                             int(np.sum([s.steps for s in sums])), mean_sps,
                             float(np.mean([s.max_sps for s in sums])),
                             float(np.mean([s.mean_over_max for s in sums])), mean_sps / ref,
                             float(np.mean([s.rollout_time_cv for s in sums])),
                             float(np.sum([r.wall_time for r in rs]))))
    return rows


def write_bench_csv(rows: Iterable[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def write_count_histogram(runs: dict[tuple[str, int], list[RunResult]], path: str | Path) -> None:
    """Histogram of per-env step counts per rollout: how often each count occurred."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "replicas", "seed", "steps", "occurrences"])
        for (regime, reps), rs in runs.items():
            for run in rs:
                hist = Counter(c for counts in run.rollout_counts for c in counts)
                for steps in sorted(hist):
                    w.writerow([regime, reps, run.seed, steps, hist[steps]])


def format_table(rows: Sequence[BenchRow]) -> str:
    head = f"{'regime':<6} {'R':>2} {'seed':>5} {'mean SPS':>10} {'max SPS':>10} {'mean/max':>9} {'vs sync':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.regime:<6} {r.replicas:>2} {r.seed:>5} {r.mean_sps:>10.0f} {r.max_sps:>10.0f} "
                     f"{r.mean_over_max:>9.3f} {r.speedup_vs_sync:>8.3f}")
    return "\n".join(lines)


# -- sample efficiency -----------------------------------------------------------------

CURVE_COLUMNS = ["steps", "seed", "regime", "mean_return"]


def return_curve(records: Sequence[IterationRecord]) -> list[tuple[int, float]]:
    """``(total_steps, mean_return)`` per iteration; iterations without a
    finished episode carry the previous value forward (NaN before the first)."""
    out: list[tuple[int, float]] = []
    last = math.nan
    for r in records:
        if math.isfinite(r.mean_return):
            last = r.mean_return
        out.append((r.total_steps, last))
    return out


def compare(cfg: RunConfig, seeds: Sequence[int], regimes: Sequence[str] = ("sync", "ver"),
            out_dir: str | Path | None = None) -> tuple[list[dict[str, Any]], dict[str, list[RunResult]]]:
    """Return-vs-steps curves per regime and seed."""
    rows: list[dict[str, Any]] = []
    runs: dict[str, list[RunResult]] = {}
    for regime in regimes:
        c = with_overrides(cfg, regime=regime)
        for seed in seeds:
            log.info("compare: regime=%s seed=%d", regime, seed)
            res = run_training(c, seed, checkpoint=False)
            runs.setdefault(regime, []).append(res)
            for steps, ret in return_curve(res.records):
                rows.append({"steps": steps, "seed": seed, "regime": regime, "mean_return": ret})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows, runs


def median_curve(results: Sequence[RunResult]) -> np.ndarray:
    """Per-update median of the carried-forward return across seeds (NaN counts as 0)."""
    curves = [np.nan_to_num(np.array([ret for _, ret in return_curve(r.records)]), nan=0.0) for r in results]
    n = min(len(c) for c in curves)
    return np.median(np.stack([c[:n] for c in curves]), axis=0)


def first_reaching(curve: np.ndarray, level: float) -> int | None:
    """1-based update index at which ``curve`` first reaches ``level``."""
    hits = np.flatnonzero(curve >= level)
    return int(hits[0]) + 1 if hits.size else None


def normalized_auc(curve: np.ndarray, optimum: float) -> float:
    """Mean of the curve over updates, in units of the optimal return."""
    return float(np.mean(curve) / optimum) if curve.size and optimum else math.nan


def task_optimum(cfg: RunConfig) -> float:
    return optimal_return(cfg.task_spec(), gamma=1.0)


# -- replay -------------------------------------------------------------------------------

def replay(path: str | Path, cfg: RunConfig, seed: int = 0, checkpoint: str | Path | None = None
           ) -> dict[str, Any]:
    """Run a dumped rollout through packing and one learner update.

    Checks the pack/unpack round trip on every mini-batch split, then
    returns the update's statistics.
    """
    view = load_jsonl(path)
    if checkpoint is not None:
        ck = load_checkpoint(checkpoint)
        policy_cfg, params = ck.policy, ck.params
    else:
        probe = make_env(cfg.task_spec(), cfg.latency_model(), seed, 0)
        policy_cfg = cfg.policy_config(probe.obs_dim, probe.discrete, probe.num_actions, probe.action_dim)
        params = init_params(policy_cfg, np.random.default_rng([seed, 1]))
    if not policy_cfg.discrete:
        view.actions = view.actions.reshape(view.size, -1)
    ppo = cfg.ppo_config()
    rng = np.random.default_rng([seed, 4])
    round_trip = True
    for group in split_minibatches(view, ppo.num_minibatches, rng):
        batch = pack(group)
        rows = np.arange(view.size, dtype=np.float64)
        flat = rows[batch.index]
        back = unpack(batch, flat)
        expect = [rows[s.offset:s.offset + s.length] for s in group.sequences]
        round_trip &= all(np.array_equal(a, b) for a, b in zip(back, expect))
    ent = cfg.entropy
    _, stats = update(view, params, Adam(params, lr=ppo.lr, eps=ppo.adam_eps), policy_cfg, ppo,
                      EntropyController(ent.initial, ent.target, ent.min, ent.max, ent.lr), rng)
    return {"steps": view.size, "sequences": view.num_sequences, "stale": view.num_stale,
            "round_trip": round_trip, **asdict(stats)}
