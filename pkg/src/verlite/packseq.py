"""Equal-size mini-batches of variable-length sequences, in packed layout.

A rollout's sequences are shuffled and poured greedily into ``B`` mini-batches
of exactly ``size / B`` steps; a sequence straddling a boundary is cut and its
tail starts the next mini-batch with a "recompute from parent" initial state.

Each mini-batch is then packed time-major: sequences sorted by length
(descending), row block ``t`` holds step ``t`` of every sequence still alive,
so ``batch_sizes`` is non-increasing and never zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from verlite import kernels
from verlite.rollout import RolloutView, SequenceDescriptor


@dataclass
class SequenceGroup:
    view: RolloutView
    sequences: list[SequenceDescriptor]

    @property
    def size(self) -> int:
        return sum(s.length for s in self.sequences)


@dataclass
class PackedBatch:
    """Packed mini-batch.

    ``index[p]`` is the view row stored at packed position ``p``. ``order[j]``
    is the group position of packed column ``j``. ``h0`` holds one initial
    state per column; rows flagged in ``recompute`` belong to split tails and
    must be filled from their parent head before use.
    """

    group: SequenceGroup
    sequences: list[SequenceDescriptor]
    order: np.ndarray
    batch_sizes: np.ndarray
    index: np.ndarray
    h0: np.ndarray
    recompute: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.index.shape[0])

    @property
    def num_sequences(self) -> int:
        return len(self.sequences)

    def gather(self, values: np.ndarray) -> np.ndarray:
        """Rows of a view-ordered array, in packed order."""
        return values[self.index]

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.batch_sizes)[:-1])).astype(np.int64)


def minibatch_sizes(total: int, num_minibatches: int, capacity: int | None = None) -> list[int]:
    if num_minibatches < 1:
        raise ValueError("need at least one mini-batch")
    if capacity is not None and capacity % num_minibatches:
        raise ValueError(f"{num_minibatches} mini-batches do not divide rollout capacity {capacity}")
    base, extra = divmod(total, num_minibatches)
    if base == 0:
        raise ValueError(f"cannot split {total} steps into {num_minibatches} mini-batches")
    return [base + (1 if i < extra else 0) for i in range(num_minibatches)]


def split_minibatches(view: RolloutView, num_minibatches: int,
                      rng: np.random.Generator | int | None = None) -> list[SequenceGroup]:
    """Shuffle the view's sequences and cut them into equal-size mini-batches.

    A full view always yields mini-batches of exactly ``capacity / B`` steps;
    a short (preempted, not backfilled) view yields sizes differing by at most 1.
    """
    sizes = minibatch_sizes(view.size, num_minibatches, view.capacity)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    perm = gen.permutation(view.num_sequences)
    groups: list[SequenceGroup] = []
    current: list[SequenceDescriptor] = []
    room = sizes[0]
    for k in perm:
        seq = view.sequences[int(k)]
        if seq.h0 is None:
            raise ValueError(f"view sequence {seq.sequence_id} has no initial state")
        offset, remaining = seq.offset, seq.length
        h0: np.ndarray | None = seq.h0
        parent = None
        while remaining > 0:
            take = min(remaining, room)
            current.append(SequenceDescriptor(seq.sequence_id, seq.env_index, take, offset, h0,
                                              seq.stale, parent))
            room -= take
            offset += take
            remaining -= take
            if remaining > 0:
                # the tail continues from the state after the whole prefix
                parent = (seq.offset, offset - seq.offset, seq.h0)
                h0 = None
            if room == 0:
                groups.append(SequenceGroup(view, current))
                current = []
                if len(groups) < len(sizes):
                    room = sizes[len(groups)]
    assert not current and len(groups) == num_minibatches
    return groups


def pack(group: SequenceGroup) -> PackedBatch:
    if not group.sequences:
        raise ValueError("cannot pack an empty group")
    lengths = np.fromiter((s.length for s in group.sequences), np.int64, len(group.sequences))
    order = np.argsort(-lengths, kind="stable")
    seqs = [group.sequences[int(j)] for j in order]
    offsets = np.fromiter((s.offset for s in seqs), np.int64, len(seqs))
    batch_sizes, index = kernels.pack_index(offsets, lengths[order].copy())
    hidden = next((s.h0.shape[0] for s in seqs if s.h0 is not None), None)
    if hidden is None:
        hidden = next(s.parent[2].shape[0] for s in seqs if s.parent is not None)
    h0 = np.zeros((len(seqs), hidden))
    recompute = np.zeros(len(seqs), dtype=bool)
    for j, s in enumerate(seqs):
        if s.h0 is None:
            recompute[j] = True
        else:
            h0[j] = s.h0
    return PackedBatch(group, seqs, order, batch_sizes, index, h0, recompute)


def unpack(batch: PackedBatch, values: np.ndarray | None = None) -> list[np.ndarray]:
    """Split packed-order ``values`` back into per-sequence arrays, in group order.

    With ``values`` omitted, the view's observations are unpacked.
    """
    if values is None:
        values = batch.gather(batch.group.view.obs)
    starts = batch.starts
    out: list[np.ndarray | None] = [None] * batch.num_sequences
    for j, s in enumerate(batch.sequences):
        out[int(batch.order[j])] = values[starts[: s.length] + j]
    return out  # type: ignore[return-value]
