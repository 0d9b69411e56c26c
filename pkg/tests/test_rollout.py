from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fill_buffer, make_record
from verlite.rollout import (
    AppendOutcome,
    ProtocolError,
    RolloutBuffer,
    dump_jsonl,
    iter_step_keys,
    load_jsonl,
)


def buffer(n: int = 4, t: int = 4, variable: bool = True) -> RolloutBuffer:
    return RolloutBuffer(n, t, obs_dim=2, hidden_size=3, variable=variable)


def test_variable_rollout_accepts_uneven_counts():
    buf = buffer()
    order = [0, 0, 1, 0, 2, 3, 0, 2, 0, 3, 1, 2, 0, 3, 2, 3]
    fill_buffer(buf, order)
    assert buf.closed and buf.size == 16
    view = buf.close_rollout()
    assert view.per_env_counts.tolist() == [6, 2, 4, 4]
    assert view.size == 16 and view.deficit == 0


def test_commit_reaching_capacity_reports_full_then_carries():
    buf = buffer(2, 2)
    outcomes = [buf.append_step(make_record(e, t)) for e, t in [(0, 0), (1, 0), (0, 1)]]
    assert outcomes == [AppendOutcome.ACCEPTED] * 3
    assert buf.append_step(make_record(1, 1)) is AppendOutcome.ROLLOUT_FULL
    assert buf.append_step(make_record(0, 2)) is AppendOutcome.CARRIED
    assert buf.pending_carryovers == 1
    with pytest.raises(ProtocolError):
        buf.append_step(make_record(0, 3))


def test_fixed_mode_rejects_steps_beyond_t():
    buf = buffer(2, 4, variable=False)
    for t in range(4):
        buf.append_step(make_record(0, t))
    assert buf.env_full(0) and not buf.env_full(1)
    assert buf.append_step(make_record(0, 4)) is AppendOutcome.REJECTED
    assert buf.size == 4


def test_carryover_is_committed_first_next_rollout():
    buf = buffer(2, 2)
    fill_buffer(buf, [0, 1, 0, 1])
    late = make_record(1, 2, reward=5.0)
    assert buf.append_step(late) is AppendOutcome.CARRIED
    buf.close_rollout()
    outcomes = buf.begin_rollout()
    assert outcomes == [AppendOutcome.ACCEPTED]
    assert buf.size == 1 and buf.counts.tolist() == [0, 1]
    fill_buffer(buf, [0, 0, 1])
    view = buf.close_rollout()
    first_env1 = np.flatnonzero(view.env_index == 1)[0]
    assert view.rewards[first_env1] == 5.0 and view.t[first_env1] == 2


def test_sequences_split_at_dones():
    buf = RolloutBuffer(2, 3, obs_dim=2, hidden_size=3)
    fill_buffer(buf, [0, 1, 0, 1, 0, 1], dones={(0, 1)})
    view = buf.close_rollout()
    assert view.sequence_lengths() == [2, 1, 3]
    assert [s.env_index for s in view.sequences] == [0, 0, 1]


def test_no_done_gives_one_sequence_per_env():
    buf = buffer(3, 2)
    fill_buffer(buf, [2, 0, 1, 2, 0, 1])
    assert buf.close_rollout().num_sequences == 3


def test_close_short_rollout_requires_preemption():
    buf = buffer()
    fill_buffer(buf, [0, 1, 2])
    with pytest.raises(ProtocolError):
        buf.close_rollout()
    buf.preempt()
    view = buf.close_rollout(preempted=True)
    assert view.deficit == 13 and view.size == 3


def test_empty_rollout_cannot_close():
    with pytest.raises(ProtocolError):
        buffer().close_rollout(preempted=True)


def test_bad_env_index():
    with pytest.raises(ProtocolError):
        buffer().append_step(make_record(9, 0))


def _previous_with_targets(buf: RolloutBuffer, order: list[int]) -> None:
    fill_buffer(buf, order)
    view = buf.close_rollout()
    view.advantages[:] = np.arange(view.size)
    view.returns[:] = -np.arange(view.size)
    buf.begin_rollout()


def test_backfill_restores_capacity_with_stale_steps():
    buf = RolloutBuffer(16, 32, obs_dim=2, hidden_size=3)
    gen = np.random.default_rng(0)
    order = list(gen.integers(0, 16, size=512))
    _previous_with_targets(buf, order)
    fill_buffer(buf, order[:480])
    buf.preempt()
    view = buf.close_rollout(preempted=True)
    assert view.deficit == 32
    full = buf.backfill_stale(view.deficit, np.random.default_rng(1))
    assert full.size == 512 and full.num_stale == 32
    assert full.stale[480:].all() and not full.stale[:480].any()
    assert np.isfinite(full.advantages[480:]).all()
    assert np.isnan(full.advantages[:480]).all()
    assert sum(s.length for s in full.sequences) == 512
    assert all(s.stale for s in full.sequences if s.offset >= 480)


def test_backfill_zero_deficit_and_first_rollout():
    buf = buffer(2, 2)
    fill_buffer(buf, [0])
    buf.preempt()
    view = buf.close_rollout(preempted=True)
    # nothing to copy from yet: the view stays short
    assert buf.backfill_stale(3).size == 1
    assert buf.backfill_stale(0) is view


def test_backfill_beyond_capacity_fails():
    buf = buffer(2, 2)
    _previous_with_targets(buf, [0, 1, 0, 1])
    fill_buffer(buf, [0])
    buf.preempt()
    buf.close_rollout(preempted=True)
    with pytest.raises(ProtocolError):
        buf.backfill_stale(4)


def test_backfill_cycles_a_short_previous_rollout():
    buf = buffer(2, 4)
    fill_buffer(buf, [0, 1])
    buf.preempt()
    prev = buf.close_rollout(preempted=True)
    prev.advantages[:] = [1.0, 2.0]
    prev.returns[:] = 0.0
    buf.begin_rollout()
    fill_buffer(buf, [0, 1, 0])
    buf.preempt()
    buf.close_rollout(preempted=True)
    view = buf.backfill_stale(5, np.random.default_rng(0))
    assert view.size == 8 and view.num_stale == 5
    assert sorted(view.advantages[3:].tolist()) in ([1.0, 1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0, 2.0])


def test_backfill_needs_targets_on_previous_rollout():
    buf = buffer(2, 2)
    fill_buffer(buf, [0, 1, 0, 1])
    buf.close_rollout()
    buf.begin_rollout()
    fill_buffer(buf, [0])
    buf.preempt()
    buf.close_rollout(preempted=True)
    with pytest.raises(ProtocolError):
        buf.backfill_stale(2)


def test_jsonl_round_trip(tmp_path):
    buf = buffer(3, 3)
    fill_buffer(buf, [0, 1, 2, 0, 1, 2, 0, 1, 2], dones={(1, 0)})
    buf.set_bootstrap(0, 0.25)
    view = buf.close_rollout()
    path = tmp_path / "r.jsonl"
    dump_jsonl(view, path)
    back = load_jsonl(path)
    for name in ("obs", "log_probs", "values", "rewards", "dones", "env_index", "episode_id", "t", "stale"):
        np.testing.assert_array_equal(getattr(back, name), getattr(view, name))
    np.testing.assert_array_equal(back.actions, view.actions)
    assert back.sequence_lengths() == view.sequence_lengths()
    np.testing.assert_array_equal(back.bootstrap, view.bootstrap)
    for a, b in zip(back.sequences, view.sequences):
        np.testing.assert_array_equal(a.h0, b.h0)


def test_load_jsonl_rejects_missing_meta(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "step"}\n')
    with pytest.raises(ValueError):
        load_jsonl(path)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.data())
def test_conservation_and_boundaries(n, t, data):
    """Across rollouts every offered step lands exactly once; sequences break at dones and rollout starts."""
    buf = RolloutBuffer(n, t, obs_dim=2, hidden_size=3)
    seen: list[tuple[int, int, int]] = []
    offered: list[tuple[int, int, int]] = []
    step_t = [0] * n
    ep = [0] * n
    for _ in range(3):
        while not buf.closed:
            e = data.draw(st.integers(0, n - 1))
            done = data.draw(st.booleans())
            offered.append((e, ep[e], step_t[e]))
            buf.append_step(make_record(e, step_t[e], done, ep[e]))
            step_t[e] += 1
            if done:
                ep[e] += 1
                step_t[e] = 0
        # one late arrival goes to carryover
        e = data.draw(st.integers(0, n - 1))
        offered.append((e, ep[e], step_t[e]))
        buf.append_step(make_record(e, step_t[e], False, ep[e]))
        step_t[e] += 1
        view = buf.close_rollout()
        assert view.size == n * t
        seen.extend(iter_step_keys(view))
        for s in view.sequences:
            rows = slice(s.offset, s.offset + s.length)
            assert (view.env_index[rows] == s.env_index).all()
            # only the last step of a sequence may be terminal
            assert not view.dones[s.offset:s.offset + s.length - 1].any()
        buf.begin_rollout()
    carried = [(r.env_index, r.episode_id, r.t) for r in buf.carryover if r is not None]
    pending = [(int(buf._env[i]), int(buf._episode[i]), int(buf._t[i])) for i in range(buf.size)]
    assert sorted(seen + carried + pending) == sorted(offered)
    assert len(set(seen)) == len(seen)


@pytest.mark.parametrize("variable", [True, False])
def test_commit_batch_matches_single_commits(variable):
    gen = np.random.default_rng(3)
    a, b = buffer(variable=variable), buffer(variable=variable)
    t, ep = [0] * 4, [0] * 4
    for size in (3, 4, 2, 4, 4, 3):  # the last batches overflow into carryover
        envs = [int(e) for e in gen.permutation(4)[:size]]
        recs = []
        for e in envs:
            done = bool(gen.random() < 0.3)
            recs.append(make_record(e, t[e], done, ep[e], reward=float(gen.standard_normal())))
            t[e], ep[e] = (0, ep[e] + 1) if done else (t[e] + 1, ep[e])
        for r in recs:
            a.append_step(r)
        b.commit_batch(envs, [r.episode_id for r in recs], [r.t for r in recs],
                       np.array([r.observation for r in recs]), [r.action for r in recs],
                       [r.log_prob for r in recs], [r.value for r in recs], [r.reward for r in recs],
                       [r.done for r in recs], np.array([r.hidden for r in recs]),
                       [r.latency for r in recs], [r.version for r in recs])
    assert a.size == b.size and a.closed == b.closed
    assert [c is None for c in a.carryover] == [c is None for c in b.carryover]
    va, vb = a.close_rollout(), b.close_rollout()
    for name in ("obs", "actions", "rewards", "dones", "env_index", "episode_id", "t"):
        np.testing.assert_array_equal(getattr(va, name), getattr(vb, name))
    assert [(s.env_index, s.offset, s.length) for s in va.sequences] == \
        [(s.env_index, s.offset, s.length) for s in vb.sequences]
    for sa, sb in zip(va.sequences, vb.sequences):
        np.testing.assert_array_equal(sa.h0, sb.h0)
