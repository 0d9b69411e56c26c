"""Experience collection: environment workers, dynamic-batching inference, regimes.

The per-env protocol is the same under every clock:

1. an env result (reward, done, next observation) arrives in its slot;
2. the inference side commits the in-flight transition to the rollout buffer,
   runs one batched forward over every request in the batch, and dispatches
   new actions to envs that may keep stepping;
3. the env steps for a simulated latency and reports back.

Regimes only differ in batching and rollout shape:

* ``sync``: full-batch barrier (min = max = N), fixed T steps per env;
* ``nover``: dynamic batching, fixed T steps per env (an env pauses at T);
* ``ver``: dynamic batching, exactly T*N steps with free per-env counts.

Once a rollout closes no action is computed with the old snapshot: waiting
envs are re-submitted with the next snapshot, and results arriving late are
committed to the next rollout (in-flight actions).
"""

from __future__ import annotations

import collections
import ctypes
import enum
import heapq
import json
import logging
import math
import sys
import threading
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import numpy as np

from verlite import kernels
from verlite.envsim import Env
from verlite.nncore import policy as pol
from verlite.nncore.policy import Params, PolicyConfig
from verlite.rollout import RolloutBuffer, RolloutView

log = logging.getLogger(__name__)

_ACTION_STREAM = 2


class Regime(str, enum.Enum):
    SYNC = "sync"
    NOVER = "nover"
    VER = "ver"

    @property
    def variable(self) -> bool:
        return self is Regime.VER


@dataclass(frozen=True)
class RegimeSelector:
    regime: Regime = Regime.VER
    overlap: bool = False

    @classmethod
    def parse(cls, name: str, overlap: bool = False) -> RegimeSelector:
        try:
            return cls(Regime(name.lower()), overlap)
        except ValueError:
            raise ValueError(f"unknown regime {name!r}; expected one of "
                             f"{[r.value for r in Regime]}") from None


@dataclass(frozen=True)
class BatchingPolicy:
    min_requests: int
    max_requests: int
    max_wait: float = 0.002

    def validate(self, num_envs: int) -> None:
        if not 1 <= self.min_requests <= self.max_requests <= num_envs:
            raise ValueError(f"need 1 <= min ({self.min_requests}) <= max ({self.max_requests})"
                             f" <= N ({num_envs})")
        if self.max_wait < 0:
            raise ValueError("max_wait must be non-negative")

    @classmethod
    def for_regime(cls, regime: Regime, num_envs: int, max_wait: float = 0.002,
                   min_requests: int = 1, max_requests: int | None = None) -> BatchingPolicy:
        if regime is Regime.SYNC:
            return cls(num_envs, num_envs, math.inf)
        return cls(min_requests, max_requests or num_envs, max_wait)

    def take(self, outstanding: int, expected: int, waited: float) -> int:
        """How many requests to batch now (0 means keep waiting).

        ``expected`` counts requests that can still arrive this rollout
        (outstanding plus in flight); the minimum never exceeds it.
        """
        if outstanding == 0:
            return 0
        need = min(self.min_requests, expected)
        if outstanding >= need or waited >= self.max_wait:
            return min(outstanding, self.max_requests)
        return 0


@dataclass(frozen=True)
class InferenceCost:
    """Virtual-clock service time of one batched forward."""

    base: float = 1e-4
    per_item: float = 1e-5

    def __call__(self, batch: int) -> float:
        return self.base + self.per_item * batch


@dataclass
class PolicySnapshot:
    version: int
    params: Params


class RolloutStalledError(RuntimeError):
    """No progress for longer than the watchdog timeout."""


@dataclass
class TimingRecord:
    regime: str
    rollout: int
    wall_time: float
    steps: int
    per_env_counts: list[int]
    idle_times: list[float]
    snapshot_version: int
    start: float
    end: float
    preempted: bool = False
    deficit: int = 0
    num_batches: int = 0
    mean_batch: float = 0.0
    policy_lag: int = 0
    replica: int = 0

    def to_json(self) -> str:
        return json.dumps({"kind": "rollout", **asdict(self)})


@dataclass
class EpisodeRecord:
    env_index: int
    episode: int
    ret: float
    length: int
    end_time: float


class SlotArray:
    """One result slot per env; each slot has a single writer (its env worker).

    Scalars live in plain lists so a write is a handful of atomic stores.
    """

    def __init__(self, num_envs: int, obs_dim: int) -> None:
        self.obs = np.zeros((num_envs, obs_dim))
        self.reward = [0.0] * num_envs
        self.done = [False] * num_envs
        self.latency = [0.0] * num_envs
        self.arrival = [0.0] * num_envs
        self.fresh = [False] * num_envs

    def write(self, env: int, obs: np.ndarray, reward: float, done: bool, latency: float, arrival: float) -> None:
        self.obs[env] = obs
        self.reward[env] = reward
        self.done[env] = done
        self.latency[env] = latency
        self.arrival[env] = arrival
        self.fresh[env] = True


_PARAM_ORDER = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "gru_wi", "gru_bi", "gru_wh", "gru_bh",
                "pi_w", "pi_b", "v_w", "v_b")
_NOISE_BLOCK = 256


class CollectorCore:
    """Clock-agnostic bookkeeping for one replica's envs and rollout buffer."""

    def __init__(self, envs: Sequence[Env], policy_cfg: PolicyConfig, steps_per_env: int,
                 regime: Regime, seed: int = 0, replica: int = 0) -> None:
        self.envs = list(envs)
        n = self.num_envs = len(self.envs)
        self.policy_cfg = policy_cfg
        self.regime = regime
        self.replica = replica
        self.steps_per_env = steps_per_env
        hs = policy_cfg.hidden_size
        action_shape = () if policy_cfg.discrete else (policy_cfg.action_dim,)
        self.buffer = RolloutBuffer(n, steps_per_env, policy_cfg.obs_dim, hs, action_shape,
                                    variable=regime.variable)
        self.slots = SlotArray(n, policy_cfg.obs_dim)
        self.hidden = np.zeros((n, hs))
        self.kernel = kernels.StepKernel(n, policy_cfg.obs_dim, policy_cfg.encoder_size, hs,
                                         policy_cfg.head_size)
        self._loaded: PolicySnapshot | None = None
        # the transition whose env step is in flight, per env
        self.has_pending = [False] * n
        self._pend_obs = np.zeros((n, policy_cfg.obs_dim))
        self._pend_h = np.zeros((n, hs))
        self._pend_action: list[Any] = [0] * n
        self._pend_logp = [0.0] * n
        self.pend_value = [0.0] * n
        self._pend_version = [0] * n
        self._pend_episode = [0] * n
        self._pend_t = [0] * n
        self.waiting_value = [math.nan] * n
        self.episode = [0] * n
        self.t = [0] * n
        self.ep_return = [0.0] * n
        self.episodes: list[EpisodeRecord] = []
        self.idle = [0.0] * n
        self.idle_since = [math.nan] * n
        self.action_rngs = [np.random.Generator(np.random.Philox(
            np.random.SeedSequence([seed, replica, e, _ACTION_STREAM]))) for e in range(n)]
        self.noise_width = pol.noise_width(policy_cfg)
        self._noise = [np.zeros((0, self.noise_width))] * n
        self._noise_pos = [0] * n
        self._u = np.zeros(n)
        self.snapshot: PolicySnapshot | None = None
        self.rollouts = 0
        self.num_batches = 0
        self.batched_requests = 0
        self.rollout_start = 0.0
        self.total_steps = 0
        self._in_flight = 0
        for e, env in enumerate(self.envs):
            self.slots.obs[e] = env.reset(seed=env.global_seed)

    # -- rollout lifecycle -------------------------------------------------

    def start_rollout(self, snapshot: PolicySnapshot, now: float) -> list[int]:
        """Open a rollout; returns envs whose observation awaits an action."""
        self.snapshot = snapshot
        if self._loaded is not snapshot:
            self.kernel.load(*(snapshot.params[k] for k in _PARAM_ORDER))
            self._loaded = snapshot
        self.buffer.begin_rollout()
        self.rollout_start = now
        self.idle = [0.0] * self.num_envs
        self.num_batches = 0
        self.batched_requests = 0
        ready = []
        for e in range(self.num_envs):
            if not self.has_pending[e] and not self.slots.fresh[e]:
                ready.append(e)
                self.idle_since[e] = now
        return ready

    @property
    def closed(self) -> bool:
        return self.buffer.closed

    def in_flight(self) -> int:
        return self._in_flight

    def _draw(self, e: int) -> np.ndarray:
        # per-env noise is drawn in blocks; the stream is the same as drawing one at a time
        pos = self._noise_pos[e]
        block = self._noise[e]
        if pos == len(block):
            rng = self.action_rngs[e]
            shape = (_NOISE_BLOCK, self.noise_width)
            block = self._noise[e] = rng.random(shape) if self.policy_cfg.discrete else rng.standard_normal(shape)
            pos = 0
        self._noise_pos[e] = pos + 1
        return block[pos]

    def _commit(self, batch: Sequence[int]) -> None:
        """Move the arrived results of ``batch`` (envs with a fresh slot) into the buffer."""
        slots = self.slots
        fresh, has_pending = slots.fresh, self.has_pending
        envs = [e for e in batch if fresh[e]]
        if not envs:
            return
        for e in envs:
            if not has_pending[e]:
                raise RuntimeError(f"env {e} reported without an action in flight")
        rewards = [slots.reward[e] for e in envs]
        dones = [slots.done[e] for e in envs]
        self.buffer.commit_batch(
            envs, [self._pend_episode[e] for e in envs], [self._pend_t[e] for e in envs], self._pend_obs[envs],
            [self._pend_action[e] for e in envs], [self._pend_logp[e] for e in envs],
            [self.pend_value[e] for e in envs], rewards, dones, self._pend_h[envs],
            [slots.latency[e] for e in envs], [self._pend_version[e] for e in envs])
        self._in_flight -= len(envs)
        for e, reward, done in zip(envs, rewards, dones):
            fresh[e] = False
            has_pending[e] = False
            self.ep_return[e] += reward
            if done:
                self.episodes.append(EpisodeRecord(e, self.episode[e], self.ep_return[e], self.t[e] + 1,
                                                   slots.arrival[e]))
                self.ep_return[e] = 0.0
                self.episode[e] += 1
                self.t[e] = 0
                self.hidden[e] = 0.0
            else:
                self.t[e] += 1
            self.idle_since[e] = slots.arrival[e]

    def process(self, batch: Sequence[int], now: float) -> list[tuple[int, Any]]:
        """Commit arrived results, run one forward, return ``(env, action)`` dispatches."""
        snap = self.snapshot
        if snap is None:
            raise RuntimeError("start_rollout() first")
        buf = self.buffer
        slots = self.slots
        nb = len(batch)
        self.num_batches += 1
        self.batched_requests += nb
        self._commit(batch)
        k = self.kernel
        k.run(batch, slots.obs, self.hidden)
        values = k.values[:nb].tolist()
        bad = np.isnan(k.values[:nb]) | np.isnan(k.head[:nb, 0])
        if bad.any():
            raise pol.NonFiniteInputError(f"policy output for env {batch[int(bad.argmax())]} is not finite")
        waiting = self.waiting_value
        for e, v in zip(batch, values):
            waiting[e] = v
        if buf.closed:
            go = []
        elif buf.variable:
            go = list(range(nb))
        else:
            go = [i for i in range(nb) if not buf.env_full(batch[i])]
        if not go:
            return []
        if self.policy_cfg.discrete:
            u = self._u
            for i in go:
                u[i] = self._draw(batch[i])[0]
            k.sample(nb, u)
            actions: list[Any] = k.actions[:nb].tolist()
            logps = k.log_probs[:nb].tolist()
        else:
            noise = np.zeros((nb, self.noise_width))
            for i in go:
                noise[i] = self._draw(batch[i])
            out = pol.StepOutput(k.head[:nb], k.values[:nb], k.hidden[:nb],
                                 np.clip(snap.params["log_std"], pol.LOG_STD_MIN, pol.LOG_STD_MAX))
            acts, lp = pol.sample(self.policy_cfg, out, noise)
            actions = list(acts)
            logps = lp.tolist()
        dispatches = []
        self._in_flight += len(go)
        idle_since = self.idle_since
        go_envs = [batch[i] for i in go]
        self._pend_obs[go_envs] = slots.obs[go_envs]
        self._pend_h[go_envs] = self.hidden[go_envs]
        self.hidden[go_envs] = k.hidden[go]
        for i in go:
            e = batch[i]
            a = actions[i]
            self.has_pending[e] = True
            self._pend_action[e] = a
            self._pend_logp[e] = logps[i]
            self.pend_value[e] = values[i]
            self._pend_version[e] = snap.version
            self._pend_episode[e] = self.episode[e]
            self._pend_t[e] = self.t[e]
            since = idle_since[e]
            if since == since:
                if now > since:
                    self.idle[e] += now - since
                idle_since[e] = math.nan
            dispatches.append((e, a))
        return dispatches

    def finish_rollout(self, now: float, preempted: bool = False) -> tuple[RolloutView, TimingRecord]:
        buf = self.buffer
        for e in range(self.num_envs):
            carry = buf.carryover[e]
            if carry is not None:
                buf.set_bootstrap(e, carry.value)
            elif self.has_pending[e]:
                buf.set_bootstrap(e, self.pend_value[e])
            else:
                buf.set_bootstrap(e, self.waiting_value[e])
            since = self.idle_since[e]
            if since == since:
                if now > since:
                    self.idle[e] += now - since
                self.idle_since[e] = math.nan
        view = buf.close_rollout(preempted=preempted or buf.size < buf.capacity)
        self.total_steps += view.size
        assert self.snapshot is not None
        rec = TimingRecord(
            regime=self.regime.value, rollout=self.rollouts, wall_time=now - self.rollout_start,
            steps=view.size, per_env_counts=view.per_env_counts.tolist(), idle_times=list(self.idle),
            snapshot_version=self.snapshot.version, start=self.rollout_start, end=now,
            preempted=view.size < view.capacity, deficit=view.deficit, num_batches=self.num_batches,
            mean_batch=self.batched_requests / max(1, self.num_batches), replica=self.replica)
        self.rollouts += 1
        return view, rec

    def env_step(self, e: int, action: Any) -> tuple[np.ndarray, float, bool, float]:
        """Step env ``e`` (auto-reset on done); returns (next obs, reward, done, latency)."""
        env = self.envs[e]
        res = env.step(action)
        obs = env.reset() if res.done else res.observation
        return obs, res.reward, res.done, res.latency


# -- shared preemption signal ---------------------------------------------------

class PreemptSignal:
    """Global step counter shared by replicas; fires once ``target`` steps are committed.

    With ``quorum`` set instead, fires when that many replicas have filled
    their rollouts (the fixed-fraction baseline).
    """

    def __init__(self, target: int | None = None, quorum: int | None = None) -> None:
        self.target = target
        self.quorum = quorum
        self._lock = threading.Lock()
        self.count = 0
        self.finished = 0
        self.fired = threading.Event()
        self._listeners: list[Callable[[], None]] = []

    def subscribe(self, fn: Callable[[], None]) -> None:
        self._listeners.append(fn)

    def add_steps(self, n: int) -> bool:
        if self.target is None or n == 0:
            return self.fired.is_set()
        with self._lock:
            self.count += n
            hit = self.count >= self.target and not self.fired.is_set()
            if hit:
                self.fired.set()
        if hit:
            self._notify()
        return self.fired.is_set()

    def replica_finished(self) -> bool:
        if self.quorum is None:
            return self.fired.is_set()
        with self._lock:
            self.finished += 1
            hit = self.finished >= self.quorum and not self.fired.is_set()
            if hit:
                self.fired.set()
        if hit:
            self._notify()
        return self.fired.is_set()

    def _notify(self) -> None:
        for fn in self._listeners:
            fn()


# -- virtual clock ----------------------------------------------------------------

class VirtualClockCollector:
    """Deterministic discrete-event collection for one or more replicas.

    Each replica has one inference server; env steps finish ``latency`` after
    their action is delivered. Ties are broken by insertion order.
    """

    def __init__(self, cores: Sequence[CollectorCore], batching: Sequence[BatchingPolicy],
                 cost: InferenceCost | None = None) -> None:
        self.cores = list(cores)
        self.batching = list(batching)
        self.cost = cost or InferenceCost()
        self.now = 0.0
        self._heap: list[tuple[float, int, int, int, Any]] = []
        self._seq = 0
        # per-replica: outstanding env ids (arrival order) and server-free time
        self._outstanding: list[list[int]] = [[] for _ in self.cores]
        for core, bp in zip(self.cores, self.batching):
            bp.validate(core.num_envs)

    def _push(self, at: float, replica: int, env: int, payload: Any) -> None:
        heapq.heappush(self._heap, (at, self._seq, replica, env, payload))
        self._seq += 1

    def advance(self, dt: float) -> None:
        self.now += dt

    def collect(self, snapshots: Sequence[PolicySnapshot],
                signals: PreemptSignal | Sequence[PreemptSignal | None] | None = None
                ) -> list[tuple[RolloutView, TimingRecord]]:
        """Run every replica until its rollout closes (or is preempted).

        ``signals`` is one shared preemption signal or one per replica.
        """
        start = self.now
        if signals is None or isinstance(signals, PreemptSignal):
            sigs: list[PreemptSignal | None] = [signals] * len(self.cores)
        else:
            sigs = list(signals)
        results: list[tuple[RolloutView, TimingRecord] | None] = [None] * len(self.cores)
        server_free = [start] * len(self.cores)
        first_wait = [math.nan] * len(self.cores)
        for r, (core, snap) in enumerate(zip(self.cores, snapshots)):
            self._outstanding[r].extend(core.start_rollout(snap, start))
        open_ = set(range(len(self.cores)))

        def close(r: int, at: float, preempted: bool) -> None:
            results[r] = self.cores[r].finish_rollout(at, preempted)
            open_.discard(r)

        while open_:
            self._deliver_due()
            # start every batch that can start now
            progressed = False
            for r in sorted(open_):
                core = self.cores[r]
                signal = sigs[r]
                if signal is not None and signal.fired.is_set() and not core.closed:
                    core.buffer.preempt()
                if core.closed:
                    close(r, max(self.now, server_free[r]), preempted=True)
                    progressed = True
                    continue
                if server_free[r] > self.now:
                    continue
                out = self._outstanding[r]
                if out and first_wait[r] != first_wait[r]:
                    first_wait[r] = self.now
                waited = self.now - first_wait[r] if out else 0.0
                n = self.batching[r].take(len(out), len(out) + core.in_flight(), waited)
                if n == 0:
                    continue
                batch, self._outstanding[r] = out[:n], out[n:]
                first_wait[r] = self.now if self._outstanding[r] else math.nan
                before = core.buffer.size
                dispatches = core.process(batch, self.now)
                done_at = self.now + self.cost(len(batch))
                server_free[r] = done_at
                for e, a in dispatches:
                    obs, rew, done, lat = core.env_step(e, a)
                    self._push(done_at + lat, r, e, (obs, rew, done, lat))
                progressed = True
                if signal is not None:
                    signal.add_steps(core.buffer.size - before)
                if core.closed:
                    if signal is not None and core.buffer.size == core.buffer.capacity:
                        signal.replica_finished()
                    close(r, done_at, preempted=False)
            if not open_ or progressed:
                continue
            # advance to the next event: arrival, server free, or wait expiry
            cands = [self._heap[0][0]] if self._heap else []
            for r in open_:
                if server_free[r] > self.now:
                    cands.append(server_free[r])
                if self._outstanding[r] and first_wait[r] == first_wait[r]:
                    exp = first_wait[r] + self.batching[r].max_wait
                    if math.isfinite(exp) and exp > self.now:
                        cands.append(exp)
            if not cands:
                raise RolloutStalledError(self._diagnose(open_))
            self.now = max(self.now, min(cands))
        end = max(rec.end for _, rec in results)  # type: ignore[union-attr]
        self.now = max(self.now, end)
        return results  # type: ignore[return-value]

    def _deliver_due(self) -> None:
        # results of closed replicas stay outstanding for their next rollout
        while self._heap and self._heap[0][0] <= self.now:
            at, _, r, e, (obs, rew, done, lat) = heapq.heappop(self._heap)
            self.cores[r].slots.write(e, obs, rew, done, lat, at)
            self._outstanding[r].append(e)

    def _diagnose(self, open_: set[int]) -> str:
        parts = []
        for r in sorted(open_):
            core = self.cores[r]
            parts.append(f"replica {r}: size={core.buffer.size}/{core.buffer.capacity} "
                         f"in_flight={core.in_flight()} outstanding={len(self._outstanding[r])} "
                         f"counts={core.buffer.counts.tolist()}")
        return "collection stalled with no pending events; " + "; ".join(parts)


# -- real clock -------------------------------------------------------------------

_STOP = object()
_PR_SET_TIMERSLACK = 29


def tighten_timer_slack() -> bool:
    """Ask Linux to wake the calling thread's timed waits on time.

    The default 50 us per-thread slack, plus interpreter overhead, makes a
    2 ms simulated step take about 2.1 ms. Returns False where unsupported.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        return ctypes.CDLL(None).prctl(_PR_SET_TIMERSLACK, 1, 0, 0, 0) == 0
    except (OSError, AttributeError):
        return False


class Mailbox:
    """Multi-producer, single-consumer message list with a timed wait.

    A lock doubles as the "maybe non-empty" flag: producers release it after
    appending, the consumer acquires it to sleep. Spurious wake-ups return an
    empty list, never a lost message.
    """

    def __init__(self) -> None:
        self._items: collections.deque[Any] = collections.deque()
        self._ready = threading.Lock()
        self._ready.acquire()

    def put(self, item: Any) -> None:
        self._items.append(item)
        try:
            self._ready.release()
        except RuntimeError:  # already signalled
            pass

    def put_many(self, items: Sequence[Any]) -> None:
        """Enqueue ``items`` with a single wake-up."""
        self._items.extend(items)
        try:
            self._ready.release()
        except RuntimeError:
            pass

    def take(self, timeout: float | None = None) -> list[Any]:
        """Everything queued; waits up to ``timeout`` seconds (forever if None) when empty."""
        items = self._items
        if not items:
            if timeout is None:
                self._ready.acquire()
            elif timeout > 0:
                self._ready.acquire(timeout=timeout)
        out = []
        while items:
            out.append(items.popleft())
        return out

    def __len__(self) -> int:
        return len(self._items)


class EnvWorker(threading.Thread):
    """Owns a disjoint subset of envs and simulates their latencies concurrently.

    Messages are lists of ``(env, action)``. Each action is stepped immediately
    and its result released to the slot array once the sampled latency has
    elapsed (a deadline heap, so the envs owned by one worker overlap in time).
    """

    def __init__(self, worker_id: int, core: CollectorCore, env_ids: Sequence[int],
                 notify: Mailbox, clock: Callable[[], float] = time.perf_counter) -> None:
        super().__init__(name=f"env-worker-{core.replica}-{worker_id}", daemon=True)
        self.core = core
        self.env_ids = list(env_ids)
        self.inbox = Mailbox()
        self.notify = notify
        self.clock = clock
        self.error: BaseException | None = None

    def run(self) -> None:
        heap: list[tuple[float, int, tuple[np.ndarray, float, bool, float]]] = []
        take = self.inbox.take
        clock = self.clock
        core = self.core
        notify = self.notify
        tighten_timer_slack()
        try:
            while True:
                msgs = take(heap[0][0] - clock()) if heap else take()
                for msg in msgs:
                    if msg is _STOP:
                        return
                    for e, action in msg:
                        res = core.env_step(e, action)
                        heapq.heappush(heap, (clock() + res[3], e, res))
                now = clock()
                if heap and heap[0][0] <= now:
                    ready = []
                    while heap and heap[0][0] <= now:
                        _, e, (obs, rew, done, lat) = heapq.heappop(heap)
                        core.slots.write(e, obs, rew, done, lat, now)
                        ready.append(e)
                    notify.put_many(ready)
        except BaseException as exc:  # surfaced by the inference loop
            self.error = exc
            notify.put(-2)

    def stop(self) -> None:
        self.inbox.put(_STOP)


def partition(num_envs: int, num_workers: int) -> list[list[int]]:
    """Round-robin split of env ids into ``num_workers`` disjoint subsets."""
    num_workers = max(1, min(num_workers, num_envs))
    return [list(range(w, num_envs, num_workers)) for w in range(num_workers)]


class RealClockCollector:
    """Threaded collection for one replica; the inference loop runs in the caller's thread."""

    _PREEMPT = -1

    def __init__(self, core: CollectorCore, batching: BatchingPolicy, num_workers: int = 4,
                 watchdog: float = 30.0, clock: Callable[[], float] = time.perf_counter) -> None:
        batching.validate(core.num_envs)
        self.core = core
        self.batching = batching
        self.watchdog = watchdog
        self.clock = clock
        self.notify = Mailbox()
        self.groups = partition(core.num_envs, num_workers)
        self.workers = [EnvWorker(w, core, ids, self.notify, clock) for w, ids in enumerate(self.groups)]
        self.owner = [0] * core.num_envs
        for w, ids in enumerate(self.groups):
            for e in ids:
                self.owner[e] = w
        self._inbox_of = [self.workers[w].inbox for w in self.owner]
        self._outstanding: list[int] = []
        self._started = False

    def start(self) -> None:
        if not self._started:
            for w in self.workers:
                w.start()
            self._started = True

    def shutdown(self) -> None:
        for w in self.workers:
            w.stop()
        for w in self.workers:
            w.join(timeout=5.0)
        self._started = False

    def __enter__(self) -> RealClockCollector:
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.shutdown()

    def wake(self) -> None:
        self.notify.put(self._PREEMPT)

    def _receive(self, item: int) -> None:
        if item == -2:
            err = next(w.error for w in self.workers if w.error is not None)
            raise RuntimeError(f"env worker failed: {err!r}") from err
        if item >= 0:
            self._outstanding.append(item)

    def collect(self, snapshot: PolicySnapshot, signal: PreemptSignal | None = None
                ) -> tuple[RolloutView, TimingRecord]:
        self.start()
        tighten_timer_slack()
        core = self.core
        clock = self.clock
        take = self.notify.take
        receive = self._receive
        batching = self.batching
        self._outstanding.extend(core.start_rollout(snapshot, clock()))
        first_wait = math.nan
        last_progress = clock()
        while True:
            if signal is not None and signal.fired.is_set() and not core.closed:
                core.buffer.preempt()
            if core.closed:
                break
            for item in take(0.0):
                receive(item)
            now = clock()
            out = self._outstanding
            if out and first_wait != first_wait:
                first_wait = now
            n = batching.take(len(out), len(out) + core.in_flight(), now - first_wait if out else 0.0)
            if n == 0:
                if out and math.isfinite(batching.max_wait):
                    timeout = max(0.0, first_wait + batching.max_wait - now)
                else:
                    timeout = self.watchdog
                items = take(timeout)
                for item in items:
                    receive(item)
                if not items and not self._outstanding and clock() - last_progress > self.watchdog:
                    raise RolloutStalledError(
                        f"no env result for {self.watchdog:.1f}s; size={core.buffer.size}/"
                        f"{core.buffer.capacity} in_flight={core.in_flight()} "
                        f"counts={core.buffer.counts.tolist()}")
                continue
            batch, self._outstanding = out[:n], out[n:]
            first_wait = now if self._outstanding else math.nan
            before = core.buffer.size
            dispatches = core.process(batch, now)
            last_progress = now
            # one message per worker: each put may cost a thread switch
            if len(dispatches) == 1:
                self._inbox_of[dispatches[0][0]].put(dispatches)
            elif dispatches:
                per_worker: dict[int, list[tuple[int, Any]]] = {}
                for d in dispatches:
                    per_worker.setdefault(self.owner[d[0]], []).append(d)
                for w, msg in per_worker.items():
                    self.workers[w].inbox.put(msg)
            if signal is not None:
                signal.add_steps(core.buffer.size - before)
                if core.closed and core.buffer.size == core.buffer.capacity:
                    signal.replica_finished()
        return core.finish_rollout(clock())


def build_cores(envs_per_replica: Sequence[Sequence[Env]], policy_cfg: PolicyConfig, steps_per_env: int,
                regime: Regime, seed: int) -> list[CollectorCore]:
    return [CollectorCore(envs, policy_cfg, steps_per_env, regime, seed, r)
            for r, envs in enumerate(envs_per_replica)]


def mark_lagged(view: RolloutView, record: TimingRecord, lag: int) -> None:
    """Flag a rollout collected ``lag`` updates behind the learner as stale."""
    record.policy_lag = lag
    if lag > 0:
        view.stale[:] = True
