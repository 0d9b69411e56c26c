"""Decentralised multi-replica training: gradient averaging, optimal preemption, stale backfill.

Replicas are threads in one process. Each owns its envs, collector, buffer and
optimizer; they meet at the gradient-average barrier and share one global
step counter used to preempt stragglers.

Preemption model: env ``i`` yields a step every ``tau_i`` seconds, so env ``i``
has produced ``min(cap_i, floor(t / tau_i))`` steps by time ``t`` and a
replica contributes at most ``replica_cap`` of those. ``Time(S)`` is the first
time at which the group total reaches ``S``, and the preemption target is
``S* = argmax_S S / (Time(S) + LT)``.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from verlite.config import RunConfig
from verlite.envsim import make_env
from verlite.learner import EntropyController, GradDict, TrainStats, update
from verlite.nncore.checkpoint import save_checkpoint
from verlite.nncore.optim import Adam
from verlite.nncore.policy import Params, PolicyConfig, init_params
from verlite.rollout import RolloutView, dump_jsonl
from verlite.runtime import (
    BatchingPolicy,
    CollectorCore,
    InferenceCost,
    PolicySnapshot,
    PreemptSignal,
    RealClockCollector,
    TimingRecord,
    VirtualClockCollector,
    build_cores,
    mark_lagged,
)

log = logging.getLogger(__name__)


# -- preemption estimator --------------------------------------------------------

@dataclass
class PreemptionEstimator:
    """Inputs of the preemption rule.

    ``tau[i]`` is env ``i``'s mean step time, ``replica_of[i]`` its replica.
    ``env_cap`` bounds any single env's yield (``None`` for variable-length
    rollouts) and ``replica_cap`` bounds each replica's yield.
    """

    tau: np.ndarray
    learn_time: float
    s_max: int
    replica_of: np.ndarray | None = None
    env_cap: int | None = None
    replica_cap: int | None = None
    _times: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.tau.ndim != 1 or len(self.tau) == 0:
            raise ValueError("need a non-empty vector of step times")
        if not np.all(self.tau > 0) or not np.all(np.isfinite(self.tau)):
            raise ValueError("step times must be positive and finite")
        if self.replica_of is None:
            self.replica_of = np.zeros(len(self.tau), dtype=np.int64)
        self.replica_of = np.asarray(self.replica_of, dtype=np.int64)
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if self.capacity < self.s_max:
            raise ValueError(f"caps allow only {self.capacity} steps but s_max is {self.s_max}")

    @property
    def capacity(self) -> float:
        per_env = math.inf if self.env_cap is None else self.env_cap
        assert self.replica_of is not None
        total = 0.0
        for r in np.unique(self.replica_of):
            n = int(np.sum(self.replica_of == r))
            cap = n * per_env
            total += cap if self.replica_cap is None else min(cap, self.replica_cap)
        return total

    def yield_times(self) -> np.ndarray:
        """``Time(S)`` for ``S = 1..s_max`` by merging the capped progressions."""
        if self._times is not None:
            return self._times
        assert self.replica_of is not None
        out = np.empty(self.s_max)
        heap = [(float(t), i, 1) for i, t in enumerate(self.tau)]
        heapq.heapify(heap)
        per_replica: dict[int, int] = {}
        s = 0
        while s < self.s_max:
            t, i, k = heapq.heappop(heap)
            r = int(self.replica_of[i])
            if self.replica_cap is not None and per_replica.get(r, 0) >= self.replica_cap:
                continue
            per_replica[r] = per_replica.get(r, 0) + 1
            out[s] = t
            s += 1
            if self.env_cap is None or k < self.env_cap:
                heapq.heappush(heap, (float((k + 1) * self.tau[i]), i, k + 1))
        self._times = out
        return out


def estimate_time(model: PreemptionEstimator, steps: int) -> float:
    if steps < 0:
        raise ValueError("step count must be >= 0")
    if steps > model.s_max:
        raise ValueError(f"S={steps} exceeds S_max={model.s_max}")
    if steps == 0:
        return 0.0
    return float(model.yield_times()[steps - 1])


def optimal_preempt_steps(model: PreemptionEstimator) -> int:
    """Exact argmax over ``S in [1, S_max]`` of ``S / (Time(S) + LT)`` (first maximiser)."""
    if not model.learn_time > 0:
        raise ValueError("learn time must be positive")
    s = np.arange(1, model.s_max + 1, dtype=np.float64)
    objective = s / (model.yield_times() + model.learn_time)
    return int(np.argmax(objective)) + 1


def step_times_from_rollouts(records: Sequence[TimingRecord]) -> np.ndarray:
    """Mean step time per env (all replicas, concatenated) from the last rollouts.

    An env's rate is its committed count over the collection time; an env that
    committed nothing is assigned twice the collection time.
    """
    taus = []
    for rec in records:
        counts = np.asarray(rec.per_env_counts, dtype=np.float64)
        wall = max(rec.wall_time, 1e-9)
        taus.append(np.where(counts > 0, wall / np.maximum(counts, 1.0), 2.0 * wall))
    return np.concatenate(taus)


# -- gradient averaging -------------------------------------------------------------

class ReplicaFailure(RuntimeError):
    """A replica left the collective; the group aborts."""


class Allreduce:
    """Element-wise mean of per-replica gradient dicts.

    The sum runs in replica order 0..R-1 on one thread and every replica
    receives the same arrays, so results are bitwise identical everywhere.
    """

    def __init__(self, replicas: int, timeout: float | None = 600.0) -> None:
        if replicas < 1:
            raise ValueError("need at least one replica")
        self.replicas = replicas
        self._barrier = threading.Barrier(replicas, timeout=timeout)
        self._slots: list[GradDict | None] = [None] * replicas
        self._result: GradDict = {}
        self.calls = 0

    def for_replica(self, replica: int) -> Callable[[GradDict], GradDict]:
        return lambda grads: self(replica, grads)

    def __call__(self, replica: int, grads: GradDict) -> GradDict:
        if self.replicas == 1:
            self.calls += 1
            return grads
        self._slots[replica] = grads
        try:
            if self._barrier.wait() == 0:
                first = self._slots[0]
                assert first is not None
                acc = {k: v.copy() for k, v in first.items()}
                for other in self._slots[1:]:
                    assert other is not None
                    for k in acc:
                        acc[k] += other[k]
                self._result = {k: v / self.replicas for k, v in acc.items()}
                self.calls += 1
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise ReplicaFailure("a replica dropped out of the gradient average") from None
        return self._result

    def abort(self) -> None:
        self._barrier.abort()


def average(grads: Sequence[GradDict]) -> GradDict:
    """Single-threaded reference of the replica mean (same summation order)."""
    acc = {k: v.copy() for k, v in grads[0].items()}
    for g in grads[1:]:
        for k in acc:
            acc[k] += g[k]
    return {k: v / len(grads) for k, v in acc.items()}


def max_divergence(params: Sequence[Params]) -> float:
    ref = params[0]
    return max((float(np.max(np.abs(p[k] - ref[k]))) for p in params[1:] for k in ref), default=0.0)


# -- metrics ----------------------------------------------------------------------

@dataclass
class IterationRecord:
    update: int
    steps: int
    total_steps: int
    window_time: float
    collect_time: float
    learn_time: float
    sps: float
    preempt_target: int | None
    deficits: list[int]
    stale_steps: list[int]
    rollout_times: list[float]
    mean_return: float
    episodes: int
    divergence: float
    policy_lag: int = 0
    seed: int = 0
    regime: str = ""

    def to_json(self) -> str:
        return json.dumps({"kind": "iteration", **asdict(self)})


class MetricsSink:
    """In-memory metric lists, mirrored to JSONL files when ``out_dir`` is set."""

    def __init__(self, out_dir: str | Path | None = None, suffix: str = "") -> None:
        self.iterations: list[IterationRecord] = []
        self.rollouts: list[TimingRecord] = []
        self.train: list[TrainStats] = []
        self._files: dict[str, Any] = {}
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for kind in ("metrics", "rollouts", "train"):
                self._files[kind] = open(self.out_dir / f"{kind}{suffix}.jsonl", "w")

    def _write(self, kind: str, line: str) -> None:
        fh = self._files.get(kind)
        if fh is not None:
            fh.write(line + "\n")
            fh.flush()

    def iteration(self, rec: IterationRecord) -> None:
        self.iterations.append(rec)
        self._write("metrics", rec.to_json())

    def rollout(self, rec: TimingRecord) -> None:
        self.rollouts.append(rec)
        self._write("rollouts", rec.to_json())

    def train_stats(self, rec: TrainStats) -> None:
        self.train.append(rec)
        self._write("train", rec.to_json())

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files = {}


# -- replica group -----------------------------------------------------------------

@dataclass
class _Replica:
    index: int
    params: Params
    opt: Adam
    ctrl: EntropyController
    rng: np.random.Generator
    core: CollectorCore
    view: RolloutView | None = None
    record: TimingRecord | None = None


class ReplicaGroup:
    """R replicas training one shared policy; R = 1 is plain single-learner training."""

    def __init__(self, cfg: RunConfig, seed: int = 0, metrics: MetricsSink | None = None,
                 checkpoint_path: str | Path | None = None, dump_dir: str | Path | None = None) -> None:
        self.cfg = cfg.validate()
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.metrics = metrics or MetricsSink()
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        R, N, T = cfg.run.replicas, cfg.rollout.num_envs, cfg.rollout.steps_per_env
        self.R, self.N, self.T = R, N, T
        task = cfg.task_spec()
        envs = [[make_env(task, cfg.latency_model(r), seed, r * N + i) for i in range(N)] for r in range(R)]
        probe = envs[0][0]
        self.policy_cfg: PolicyConfig = cfg.policy_config(probe.obs_dim, probe.discrete,
                                                          probe.num_actions, probe.action_dim)
        self.regime = cfg.regime
        cores = build_cores(envs, self.policy_cfg, T, self.regime, seed)
        params0 = init_params(self.policy_cfg, np.random.default_rng([seed, 1]))
        ppo = cfg.ppo_config()
        total_opt_steps = cfg.updates * ppo.epochs * ppo.num_minibatches
        ent = cfg.entropy
        self.ppo = ppo
        self.replicas = [
            _Replica(r, {k: v.copy() for k, v in params0.items()},
                     Adam(params0, lr=ppo.lr, eps=ppo.adam_eps, total_steps=total_opt_steps),
                     EntropyController(ent.initial, ent.target, ent.min, ent.max, ent.lr),
                     np.random.default_rng([seed, 2, r]), cores[r])
            for r in range(R)]
        inf = cfg.inference
        self.batching = BatchingPolicy.for_regime(self.regime, N, inf.max_wait, inf.min_requests,
                                                  cfg.max_requests)
        self.virtual = cfg.run.virtual_clock
        if self.virtual:
            self.vcollector = VirtualClockCollector(cores, [self.batching] * R,
                                                    InferenceCost(inf.virtual_base, inf.virtual_per_item))
            self.collectors: list[RealClockCollector] = []
        else:
            self.collectors = [RealClockCollector(c, self.batching, inf.env_workers, inf.watchdog) for c in cores]
        self.allreduce = Allreduce(R)
        self.version = 0
        self.total_steps = 0
        self.updates_done = 0
        self._episode_cursor = [0] * R
        self._last_records: list[TimingRecord] = []
        self._last_learn_time = 0.0

    # -- lifecycle -------------------------------------------------------------

    def close(self) -> None:
        for c in self.collectors:
            c.shutdown()

    def __enter__(self) -> ReplicaGroup:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    @property
    def params(self) -> Params:
        return self.replicas[0].params

    # -- preemption --------------------------------------------------------------

    def _signals(self) -> list[PreemptSignal | None]:
        pre = self.cfg.preemption
        # nothing to backfill from before the first update
        if pre.mode == "none" or self.updates_done == 0:
            return [None] * self.R
        if pre.mode == "ddppo":
            sig = PreemptSignal(quorum=math.ceil(pre.ddppo_fraction * self.R))
            return [sig] * self.R
        if not self._last_records or self._last_learn_time <= 0:
            return [None] * self.R
        taus = step_times_from_rollouts(self._last_records)
        cap = self.T * self.N
        if pre.scope == "per_replica":
            sigs: list[PreemptSignal | None] = []
            for r in range(self.R):
                est = PreemptionEstimator(taus[r * self.N:(r + 1) * self.N], self._last_learn_time, cap,
                                          replica_cap=cap)
                sigs.append(PreemptSignal(target=optimal_preempt_steps(est)))
            return sigs
        est = PreemptionEstimator(taus, self._last_learn_time, cap * self.R,
                                  replica_of=np.repeat(np.arange(self.R), self.N), replica_cap=cap)
        sig = PreemptSignal(target=optimal_preempt_steps(est))
        return [sig] * self.R

    # -- phases ----------------------------------------------------------------

    def _snapshots(self) -> list[PolicySnapshot]:
        return [PolicySnapshot(self.version, rep.params) for rep in self.replicas]

    def _collect(self, signals: list[PreemptSignal | None],
                 snaps: list[PolicySnapshot]) -> list[tuple[RolloutView, TimingRecord]]:
        if self.virtual:
            return self.vcollector.collect(snaps, signals)
        for c, s in zip(self.collectors, signals):
            if s is not None:
                s.subscribe(c.wake)
        if self.R == 1:
            return [self.collectors[0].collect(snaps[0], signals[0])]
        results: list[Any] = [None] * self.R
        errors: list[BaseException] = []

        def run(r: int) -> None:
            try:
                results[r] = self.collectors[r].collect(snaps[r], signals[r])
            except BaseException as exc:
                errors.append(exc)
                for s in signals:
                    if s is not None:
                        s.fired.set()
                for c in self.collectors:
                    c.wake()

        threads = [threading.Thread(target=run, args=(r,), name=f"replica-{r}-collect") for r in range(self.R)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return results

    def _learn(self, views: list[RolloutView], lags: Sequence[int] = ()) -> tuple[list[TrainStats], float]:
        start = time.perf_counter()
        stats: list[Any] = [None] * self.R
        errors: list[BaseException] = []

        def run(r: int) -> None:
            rep = self.replicas[r]
            try:
                rep.params, st = update(views[r], rep.params, rep.opt, self.policy_cfg, self.ppo, rep.ctrl,
                                        rep.rng, self.updates_done, self.allreduce.for_replica(r))
                st.replica = r
                stats[r] = st
            except BaseException as exc:
                errors.append(exc)
                self.allreduce.abort()

        if self.R == 1:
            run(0)
        else:
            threads = [threading.Thread(target=run, args=(r,), name=f"replica-{r}-learn") for r in range(self.R)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if errors:
            raise errors[0]
        self.version += 1
        self.updates_done += 1
        return stats, time.perf_counter() - start

    def _backfill(self, results: list[tuple[RolloutView, TimingRecord]]) -> list[RolloutView]:
        views = []
        for rep, (view, rec) in zip(self.replicas, results):
            if view.size < view.capacity:
                rng = np.random.default_rng([self.seed, 3, rep.index, self.updates_done])
                view = rep.core.buffer.backfill_stale(view.capacity - view.size, rng)
            views.append(view)
        return views

    def _dump(self, views: list[RolloutView]) -> None:
        if self.dump_dir is None:
            return
        for r, view in enumerate(views):
            dump_jsonl(view, self.dump_dir / f"rollout-u{self.updates_done:05d}-r{r}.jsonl")

    def _episodes(self) -> tuple[float, int]:
        rets = []
        for r, rep in enumerate(self.replicas):
            eps = rep.core.episodes
            rets.extend(e.ret for e in eps[self._episode_cursor[r]:])
            self._episode_cursor[r] = len(eps)
        return (float(np.mean(rets)) if rets else math.nan), len(rets)

    def _record(self, results: list[tuple[RolloutView, TimingRecord]], views: list[RolloutView],
                stats: list[TrainStats], collect_time: float, learn_time: float, window: float,
                target: int | None, lag: int = 0) -> IterationRecord:
        fresh = sum(rec.steps for _, rec in results)
        self.total_steps += fresh
        mean_ret, n_eps = self._episodes()
        for _, rec in results:
            self.metrics.rollout(rec)
        for st in stats:
            self.metrics.train_stats(st)
        rec = IterationRecord(
            update=self.updates_done, steps=fresh, total_steps=self.total_steps, window_time=window,
            collect_time=collect_time, learn_time=learn_time, sps=fresh / window if window > 0 else math.inf,
            preempt_target=target, deficits=[v.deficit for v, _ in results],
            stale_steps=[v.num_stale for v in views], rollout_times=[r.wall_time for _, r in results],
            mean_return=mean_ret, episodes=n_eps, divergence=max_divergence([r.params for r in self.replicas]),
            policy_lag=lag, seed=self.seed, regime=self.regime.value)
        self.metrics.iteration(rec)
        return rec

    def _maybe_checkpoint(self, final: bool = False) -> None:
        every = self.cfg.run.checkpoint_every
        if self.checkpoint_path is None:
            return
        if final or (every and self.updates_done % every == 0):
            rep = self.replicas[0]
            save_checkpoint(self.checkpoint_path, self.policy_cfg, rep.params, rep.opt,
                            {"update": self.updates_done, "version": self.version, "alpha": rep.ctrl.alpha,
                             "entropy": rep.ctrl.state_dict(), "total_steps": self.total_steps,
                             "seed": self.seed})

    def iterate(self) -> IterationRecord:
        """One non-overlapped iteration: collect, backfill, learn."""
        signals = self._signals()
        target = next((s.target for s in signals if s is not None), None)
        t0 = self.vcollector.now if self.virtual else time.perf_counter()
        results = self._collect(signals, self._snapshots())
        if self.virtual:
            collect_time = self.vcollector.now - t0
        else:
            collect_time = time.perf_counter() - t0
        views = self._backfill(results)
        self._dump(views)
        stats, wall_learn = self._learn(views)
        learn_time = self.cfg.run.virtual_learn_time if self.virtual else wall_learn
        if self.virtual:
            self.vcollector.advance(learn_time)
        self._last_records = [rec for _, rec in results]
        self._last_learn_time = learn_time
        rec = self._record(results, views, stats, collect_time, learn_time, collect_time + learn_time, target)
        self._maybe_checkpoint()
        return rec

    def train(self, num_updates: int | None = None,
              on_iteration: Callable[[IterationRecord], None] | None = None) -> list[IterationRecord]:
        n = self.cfg.updates if num_updates is None else num_updates
        out = []
        if self.cfg.run.overlap:
            out = self._train_overlapped(n, on_iteration)
        else:
            for _ in range(n):
                rec = self.iterate()
                out.append(rec)
                if on_iteration:
                    on_iteration(rec)
        self._maybe_checkpoint(final=True)
        return out

    def _train_overlapped(self, n: int, on_iteration: Callable[[IterationRecord], None] | None
                          ) -> list[IterationRecord]:
        """Learn on rollout k while collecting rollout k+1 with the pre-update snapshot."""
        out: list[IterationRecord] = []
        pending: tuple[list[tuple[RolloutView, TimingRecord]], int] | None = None
        while self.updates_done < n:
            collect_version = self.version
            snaps = self._snapshots()
            results: list[tuple[RolloutView, TimingRecord]] | None = None
            learn_out: list[Any] = [None, 0.0]
            collect_err: list[BaseException] = []
            t0 = self.vcollector.now if self.virtual else time.perf_counter()

            def collect() -> None:
                nonlocal results
                try:
                    results = self._collect([None] * self.R, snaps)
                except BaseException as exc:
                    collect_err.append(exc)

            def learn() -> None:
                assert pending is not None
                res, version = pending
                lag = self.version - version
                views = [v for v, _ in res]
                self._dump(views)
                for (v, rec) in res:
                    mark_lagged(v, rec, lag)
                learn_out[0], learn_out[1] = self._learn(views)
                learn_out.append(lag)

            if pending is None:
                collect()
                if collect_err:
                    raise collect_err[0]
                collect_time = (self.vcollector.now if self.virtual else time.perf_counter()) - t0
                assert results is not None
                self._last_records = [rec for _, rec in results]
                pending = (results, collect_version)
                continue
            if self.virtual:
                collect()
                collect_time = self.vcollector.now - t0
                learn()
                learn_time = self.cfg.run.virtual_learn_time
                if learn_time > collect_time:
                    self.vcollector.advance(learn_time - collect_time)
                window = max(collect_time, learn_time)
            else:
                th = threading.Thread(target=collect, name="overlap-collect")
                th.start()
                learn()
                th.join()
                window = time.perf_counter() - t0
                learn_time = learn_out[1]
                collect_time = window
            if collect_err:
                raise collect_err[0]
            assert results is not None
            learned, _ = pending
            rec = self._record(learned, [v for v, _ in learned], learn_out[0], collect_time, learn_time,
                               window, None, lag=int(learn_out[2]))
            out.append(rec)
            if on_iteration:
                on_iteration(rec)
            pending = (results, collect_version)
        return out
