"""Rollout storage for fixed-length and variable experience rollouts.

The buffer holds exactly ``T * N`` committed steps. In variable mode any
environment may contribute any number of them; in fixed mode each contributes
exactly ``T``. Transitions that complete after the buffer closes wait in a
per-environment carryover slot and are committed first in the next rollout.

Closing produces a :class:`RolloutView` whose steps are reordered so every
sequence (a run of steps sharing one recurrent-state lineage) is contiguous.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


class ProtocolError(RuntimeError):
    """A producer broke the buffer's commit protocol."""


class AppendOutcome(enum.Enum):
    ACCEPTED = "accepted"
    ROLLOUT_FULL = "rollout_full"
    CARRIED = "carried"
    REJECTED = "rejected"


@dataclass
class StepRecord:
    """One completed transition as seen by the inference worker."""

    env_index: int
    episode_id: int
    t: int
    observation: np.ndarray
    action: Any
    log_prob: float
    value: float
    reward: float
    done: bool
    hidden: np.ndarray
    latency: float = 0.0
    version: int = 0


@dataclass
class SequenceDescriptor:
    """A contiguous run ``[offset, offset + length)`` of a rollout view.

    ``h0`` is the recurrent state fed with the first step. Tails produced by
    mini-batch splitting have ``h0 = None`` and ``parent`` set to the
    ``(offset, length, h0)`` of the head whose final state they continue from.
    """

    sequence_id: int
    env_index: int
    length: int
    offset: int
    h0: np.ndarray | None
    stale: bool = False
    parent: tuple[int, int, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")


@dataclass
class RolloutView:
    """Closed rollout; step arrays are in sequence-contiguous order."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    env_index: np.ndarray
    episode_id: np.ndarray
    t: np.ndarray
    version: np.ndarray
    latency: np.ndarray
    stale: np.ndarray
    sequences: list[SequenceDescriptor]
    bootstrap: np.ndarray
    num_envs: int
    capacity: int
    deficit: int = 0
    per_env_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        # targets are NaN until the learner computes them; stale steps arrive with theirs
        if self.advantages.shape != self.values.shape:
            self.advantages = np.full(self.values.shape, np.nan)
        if self.returns.shape != self.values.shape:
            self.returns = np.full(self.values.shape, np.nan)

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_sequences(self) -> int:
        return len(self.sequences)

    @property
    def seq_offsets(self) -> np.ndarray:
        return np.fromiter((s.offset for s in self.sequences), np.int64, len(self.sequences))

    @property
    def seq_lengths(self) -> np.ndarray:
        return np.fromiter((s.length for s in self.sequences), np.int64, len(self.sequences))

    def sequence_lengths(self) -> list[int]:
        return [s.length for s in self.sequences]

    @property
    def num_stale(self) -> int:
        return int(self.stale.sum())


_STEP_FIELDS = ("obs", "actions", "log_probs", "values", "rewards", "dones", "env_index",
                "episode_id", "t", "version", "latency", "stale", "advantages", "returns")


class RolloutBuffer:
    """Preallocated ``T x N`` experience store with carryover slots.

    Only one producer may append at a time (the runtime serialises appends
    through a single commit gate); readers only see closed views.
    """

    def __init__(self, num_envs: int, steps_per_env: int, obs_dim: int, hidden_size: int,
                 action_shape: tuple[int, ...] = (), variable: bool = True) -> None:
        if num_envs < 1 or steps_per_env < 1:
            raise ValueError("num_envs and steps_per_env must be >= 1")
        self.num_envs = num_envs
        self.steps_per_env = steps_per_env
        self.capacity = num_envs * steps_per_env
        self.variable = variable
        self.obs_dim = obs_dim
        self.hidden_size = hidden_size
        self.action_shape = tuple(action_shape)
        cap = self.capacity
        self._obs = np.zeros((cap, obs_dim))
        self._actions = np.zeros((cap, *self.action_shape))
        self._log_probs = np.zeros(cap)
        self._values = np.zeros(cap)
        self._rewards = np.zeros(cap)
        self._dones = np.zeros(cap, dtype=bool)
        self._env = np.zeros(cap, dtype=np.int64)
        self._episode = np.zeros(cap, dtype=np.int64)
        self._t = np.zeros(cap, dtype=np.int64)
        self._version = np.zeros(cap, dtype=np.int64)
        self._latency = np.zeros(cap)
        self._seq = np.zeros(cap, dtype=np.int64)
        self._seq_h0: dict[int, np.ndarray] = {}
        self.counts = np.zeros(num_envs, dtype=np.int64)
        self.carryover: list[StepRecord | None] = [None] * num_envs
        self.next_values = np.full(num_envs, np.nan)
        self._current_seq = np.full(num_envs, -1, dtype=np.int64)
        self._next_seq_id = 0
        self.size = 0
        self.closed = False
        self.rollouts_closed = 0
        self.current_view: RolloutView | None = None
        self.previous_view: RolloutView | None = None

    # -- commit path -------------------------------------------------------

    def append_step(self, rec: StepRecord) -> AppendOutcome:
        return self.commit(rec.env_index, rec.episode_id, rec.t, rec.observation, rec.action,
                           rec.log_prob, rec.value, rec.reward, rec.done, rec.hidden, rec.latency,
                           rec.version)

    def commit(self, env: int, episode_id: int, t: int, observation: np.ndarray, action: Any,
               log_prob: float, value: float, reward: float, done: bool, hidden: np.ndarray,
               latency: float = 0.0, version: int = 0) -> AppendOutcome:
        """Field-wise :meth:`append_step`; array arguments are copied, never retained."""
        if not 0 <= env < self.num_envs:
            raise ProtocolError(f"env index {env} out of range")
        if self.closed:
            if self.carryover[env] is not None:
                raise ProtocolError(f"env {env} already has a pending carryover transition")
            self.carryover[env] = StepRecord(
                env, episode_id, t, np.array(observation, dtype=np.float64),
                action.copy() if isinstance(action, np.ndarray) else action, log_prob,
                value, reward, done, np.array(hidden, dtype=np.float64), latency, version)
            return AppendOutcome.CARRIED
        counts = self.counts
        if not self.variable and counts[env] >= self.steps_per_env:
            return AppendOutcome.REJECTED
        i = self.size
        seq = self._current_seq[env]
        if seq < 0:
            seq = self._next_seq_id
            self._next_seq_id += 1
            self._current_seq[env] = seq
            self._seq_h0[int(seq)] = np.array(hidden, dtype=np.float64)
        self._obs[i] = observation
        self._actions[i] = action
        self._log_probs[i] = log_prob
        self._values[i] = value
        self._rewards[i] = reward
        self._dones[i] = done
        self._env[i] = env
        self._episode[i] = episode_id
        self._t[i] = t
        self._version[i] = version
        self._latency[i] = latency
        self._seq[i] = seq
        if done:
            self._current_seq[env] = -1
        self.size = i + 1
        counts[env] += 1
        if self.size == self.capacity:
            self.closed = True
            return AppendOutcome.ROLLOUT_FULL
        return AppendOutcome.ACCEPTED

    def commit_batch(self, envs: Sequence[int], episode_ids: Sequence[int], ts: Sequence[int],
                     observations: np.ndarray, actions: Sequence[Any], log_probs: Sequence[float],
                     values: Sequence[float], rewards: Sequence[float], dones: Sequence[bool],
                     hidden: np.ndarray, latency: Sequence[float], versions: Sequence[int]) -> None:
        """:meth:`commit` for distinct envs in order, vectorized when the whole batch fits."""
        k = len(envs)
        counts = self.counts
        if (self.closed or k >= self.capacity - self.size
                or (not self.variable and any(counts[e] >= self.steps_per_env for e in envs))):
            for j, e in enumerate(envs):
                self.commit(e, episode_ids[j], ts[j], observations[j], actions[j], log_probs[j], values[j],
                            rewards[j], dones[j], hidden[j], latency[j], versions[j])
            return
        if not all(0 <= e < self.num_envs for e in envs):
            raise ProtocolError(f"env index out of range in {list(envs)}")
        i = self.size
        rows = slice(i, i + k)
        current = self._current_seq
        seqs = []
        for j, e in enumerate(envs):
            seq = current[e]
            if seq < 0:
                seq = self._next_seq_id
                self._next_seq_id += 1
                self._seq_h0[int(seq)] = np.array(hidden[j], dtype=np.float64)
            current[e] = -1 if dones[j] else seq
            seqs.append(seq)
        self._obs[rows] = observations
        self._actions[rows] = actions
        self._log_probs[rows] = log_probs
        self._values[rows] = values
        self._rewards[rows] = rewards
        self._dones[rows] = dones
        self._env[rows] = envs
        self._episode[rows] = episode_ids
        self._t[rows] = ts
        self._version[rows] = versions
        self._latency[rows] = latency
        self._seq[rows] = seqs
        counts[envs] += 1
        self.size = i + k

    def env_full(self, env: int) -> bool:
        """True when a fixed-length rollout has no room left for ``env``."""
        return self.closed or (not self.variable and self.counts[env] >= self.steps_per_env)

    def set_bootstrap(self, env: int, value: float) -> None:
        """Value of the observation following ``env``'s latest committed step."""
        self.next_values[env] = value

    def preempt(self) -> None:
        """Stop accepting commits; later arrivals go to carryover."""
        self.closed = True

    # -- close / reopen ----------------------------------------------------

    def close_rollout(self, preempted: bool = False) -> RolloutView:
        if self.size == 0:
            raise ProtocolError("cannot close an empty rollout")
        if self.size < self.capacity and not preempted:
            raise ProtocolError(f"rollout holds {self.size}/{self.capacity} steps and was not preempted")
        self.closed = True
        n = self.size
        order = np.lexsort((np.arange(n), self._env[:n]))
        seq_sorted = self._seq[:n][order]
        starts = np.flatnonzero(np.r_[True, seq_sorted[1:] != seq_sorted[:-1]])
        ends = np.r_[starts[1:], n]
        dones = self._dones[:n][order]
        envs = self._env[:n][order]
        sequences = []
        bootstrap = np.empty(len(starts))
        for k, (s, e) in enumerate(zip(starts, ends)):
            sid = int(seq_sorted[s])
            env = int(envs[s])
            sequences.append(SequenceDescriptor(sid, env, int(e - s), int(s), self._seq_h0[sid]))
            bootstrap[k] = 0.0 if dones[e - 1] else self.next_values[env]
        view = RolloutView(
            obs=self._obs[:n][order],
            actions=self._actions[:n][order],
            log_probs=self._log_probs[:n][order],
            values=self._values[:n][order],
            rewards=self._rewards[:n][order],
            dones=dones,
            env_index=envs,
            episode_id=self._episode[:n][order],
            t=self._t[:n][order],
            version=self._version[:n][order],
            latency=self._latency[:n][order],
            stale=np.zeros(n, dtype=bool),
            sequences=sequences,
            bootstrap=bootstrap,
            num_envs=self.num_envs,
            capacity=self.capacity,
            deficit=self.capacity - n,
            per_env_counts=self.counts.copy(),
        )
        self.current_view = view
        self.rollouts_closed += 1
        return view

    def begin_rollout(self) -> list[AppendOutcome]:
        """Open the next rollout and commit pending carryover transitions first."""
        if self.current_view is not None:
            self.previous_view = self.current_view
            self.current_view = None
        self._seq_h0 = {}
        self.size = 0
        self.counts[:] = 0
        self._current_seq[:] = -1
        self.next_values[:] = np.nan
        self.closed = False
        pending = self.carryover
        self.carryover = [None] * self.num_envs
        return [self.append_step(rec) for rec in pending if rec is not None]

    @property
    def pending_carryovers(self) -> int:
        return sum(rec is not None for rec in self.carryover)

    # -- stale backfill ----------------------------------------------------

    def backfill_stale(self, deficit: int, rng: np.random.Generator | None = None) -> RolloutView:
        """Top up the current (preempted) view with sequences from the previous one.

        Whole sequences are copied in a random order, the last one truncated to
        fit; a deficit larger than the previous view cycles through it again. Copied steps keep their behaviour log-probs, values and advantage
        targets and are flagged stale. Without a previous rollout the view is
        returned unchanged (still short).
        """
        view = self.current_view
        if view is None:
            raise ProtocolError("no closed rollout to backfill")
        if deficit <= 0:
            return view
        prev = self.previous_view
        if prev is None:
            return view
        if deficit > view.capacity - view.size:
            raise ProtocolError(f"deficit {deficit} exceeds the {view.capacity - view.size} free steps")
        rng = rng if rng is not None else np.random.default_rng(self.rollouts_closed)
        picks: list[tuple[SequenceDescriptor, int]] = []
        need = deficit
        while need > 0:
            for k in rng.permutation(prev.num_sequences):
                if need == 0:
                    break
                seq = prev.sequences[int(k)]
                take = min(seq.length, need)
                picks.append((seq, take))
                need -= take
        idx = np.concatenate([np.arange(s.offset, s.offset + take) for s, take in picks])
        base = view.size
        new_seqs = list(view.sequences)
        off = base
        for s, take in picks:
            new_seqs.append(SequenceDescriptor(s.sequence_id, s.env_index, take, off, s.h0, stale=True))
            off += take
        arrays = {}
        for name in _STEP_FIELDS:
            arrays[name] = np.concatenate((getattr(view, name), getattr(prev, name)[idx]))
        arrays["stale"][base:] = True
        if np.isnan(arrays["advantages"][base:]).any():
            raise ProtocolError("previous rollout has no advantage targets to reuse")
        out = RolloutView(
            **arrays,
            sequences=new_seqs,
            bootstrap=np.concatenate((view.bootstrap, np.zeros(len(picks)))),
            num_envs=view.num_envs,
            capacity=view.capacity,
            deficit=view.deficit,
            per_env_counts=view.per_env_counts,
        )
        self.current_view = out
        return out


# -- debug dumps -----------------------------------------------------------

def dump_jsonl(view: RolloutView, path: str | Path) -> None:
    """Write a view as JSONL: one meta line, then one line per step."""
    seq_of_step = np.empty(view.size, dtype=np.int64)
    for s in view.sequences:
        seq_of_step[s.offset : s.offset + s.length] = s.sequence_id
    with open(path, "w", encoding="utf-8") as fh:
        meta = {
            "kind": "meta",
            "num_envs": view.num_envs,
            "capacity": view.capacity,
            "deficit": view.deficit,
            "sequences": [
                {"sequence_id": s.sequence_id, "env_index": s.env_index, "length": s.length,
                 "offset": s.offset, "stale": s.stale,
                 "h0": None if s.h0 is None else s.h0.tolist(), "bootstrap": float(b)}
                for s, b in zip(view.sequences, view.bootstrap)
            ],
        }
        fh.write(json.dumps(meta) + "\n")
        for i in range(view.size):
            rec = {
                "kind": "step",
                "env_index": int(view.env_index[i]),
                "episode_id": int(view.episode_id[i]),
                "t": int(view.t[i]),
                "sequence_id": int(seq_of_step[i]),
                "observation": view.obs[i].tolist(),
                "action": np.asarray(view.actions[i]).tolist(),
                "log_prob": float(view.log_probs[i]),
                "value": float(view.values[i]),
                "reward": float(view.rewards[i]),
                "done": bool(view.dones[i]),
                "latency": float(view.latency[i]),
                "version": int(view.version[i]),
                "stale": bool(view.stale[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path: str | Path) -> RolloutView:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    meta, steps = lines[0], lines[1:]
    if meta.get("kind") != "meta":
        raise ValueError(f"{path}: first line must be the meta record")

    def col(key: str, dtype: Any) -> np.ndarray:
        return np.array([s[key] for s in steps], dtype=dtype)

    sequences = [
        SequenceDescriptor(d["sequence_id"], d["env_index"], d["length"], d["offset"],
                           None if d["h0"] is None else np.array(d["h0"]), d["stale"])
        for d in meta["sequences"]
    ]
    counts = np.bincount(col("env_index", np.int64), minlength=meta["num_envs"])
    return RolloutView(
        obs=col("observation", np.float64),
        actions=col("action", np.float64),
        log_probs=col("log_prob", np.float64),
        values=col("value", np.float64),
        rewards=col("reward", np.float64),
        dones=col("done", bool),
        env_index=col("env_index", np.int64),
        episode_id=col("episode_id", np.int64),
        t=col("t", np.int64),
        version=col("version", np.int64),
        latency=col("latency", np.float64),
        stale=col("stale", bool),
        sequences=sequences,
        bootstrap=np.array([d["bootstrap"] for d in meta["sequences"]]),
        num_envs=meta["num_envs"],
        capacity=meta["capacity"],
        deficit=meta["deficit"],
        per_env_counts=counts,
    )


def iter_step_keys(view: RolloutView) -> Iterable[tuple[int, int, int]]:
    """``(env, episode, t)`` tags of every step, for no-loss accounting."""
    return zip(view.env_index.tolist(), view.episode_id.tolist(), view.t.tolist())
