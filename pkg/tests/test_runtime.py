from __future__ import annotations

import threading
import time

import numpy as np
import pytest

from conftest import env_for, small_config
from verlite.distributed import ReplicaGroup
from verlite.envsim import LatencyModel
from verlite.nncore.policy import PolicyConfig, init_params
from verlite.runtime import (BatchingPolicy, CollectorCore, Mailbox, PolicySnapshot, RealClockCollector, Regime,
                             RegimeSelector, RolloutStalledError, VirtualClockCollector, partition)


def test_dynamic_batching_examples():
    bp = BatchingPolicy(1, 8, 0.002)
    assert bp.take(5, 16, 0.0) == 5
    assert bp.take(12, 16, 0.0) == 8
    assert bp.take(4, 8, 0.0) == 4
    assert bp.take(0, 16, 1.0) == 0


def test_sync_batching_waits_for_every_env():
    bp = BatchingPolicy.for_regime(Regime.SYNC, 16)
    assert (bp.min_requests, bp.max_requests) == (16, 16)
    assert bp.take(15, 16, 10.0) == 0
    assert bp.take(16, 16, 0.0) == 16
    # fewer can arrive once some envs are done for the rollout
    assert bp.take(6, 6, 0.0) == 6


def test_min_batch_and_wait_expiry():
    bp = BatchingPolicy(4, 8, 0.01)
    assert bp.take(2, 16, 0.005) == 0
    assert bp.take(2, 16, 0.01) == 2
    assert bp.take(2, 2, 0.0) == 2


def test_batching_validation_and_regime_parse():
    with pytest.raises(ValueError):
        BatchingPolicy(5, 4).validate(8)
    with pytest.raises(ValueError):
        BatchingPolicy(1, 9).validate(8)
    with pytest.raises(ValueError):
        BatchingPolicy(1, 4, -1.0).validate(8)
    assert RegimeSelector.parse("VER").regime is Regime.VER
    assert RegimeSelector.parse("sync", overlap=True).overlap
    with pytest.raises(ValueError, match="unknown regime"):
        RegimeSelector.parse("async")
    assert Regime.VER.variable and not Regime.NOVER.variable


def _cores(regime, latency, num_envs=8, steps=16, seed=0, replicas=1, task="latency_only", **params):
    envs = [[env_for(task, seed, r * num_envs + i, latency, **params) for i in range(num_envs)]
            for r in range(replicas)]
    probe = envs[0][0]
    pcfg = PolicyConfig(probe.obs_dim, probe.discrete, probe.num_actions, probe.action_dim, 8, 8)
    cores = [CollectorCore(e, pcfg, steps, regime, seed, r) for r, e in enumerate(envs)]
    return cores, PolicySnapshot(0, init_params(pcfg, seed))


def _virtual_rollouts(regime, latency, n=3, **kw):
    cores, snap = _cores(regime, latency, **kw)
    bp = BatchingPolicy.for_regime(regime, cores[0].num_envs)
    vc = VirtualClockCollector(cores, [bp] * len(cores))
    out = []
    for _ in range(n):
        out.append(vc.collect([snap] * len(cores))[0])
    return out


HETERO = LatencyModel(base=0.002, jitter_sigma=0.5, episode_sigma=0.75)


@pytest.mark.parametrize("regime", [Regime.SYNC, Regime.NOVER])
def test_fixed_length_regimes_give_t_steps_per_env(regime):
    for view, rec in _virtual_rollouts(regime, HETERO):
        assert view.size == 8 * 16
        assert rec.per_env_counts == [16] * 8
        assert not rec.preempted


def test_ver_fills_exactly_tn_with_free_counts():
    counts = []
    for view, rec in _virtual_rollouts(Regime.VER, HETERO, n=5):
        assert view.size == 8 * 16 == sum(rec.per_env_counts)
        counts.append(rec.per_env_counts)
    assert any(c != [16] * 8 for c in counts)


def test_sync_batches_are_full_and_ver_batches_smaller():
    (_, sync_rec), = _virtual_rollouts(Regime.SYNC, HETERO, n=1)
    assert sync_rec.mean_batch == 8.0
    (_, ver_rec), = _virtual_rollouts(Regime.VER, HETERO, n=1)
    assert ver_rec.mean_batch < 8.0


def test_ver_is_faster_than_sync_under_heterogeneous_latency():
    def total(regime):
        return sum(rec.wall_time for _, rec in _virtual_rollouts(regime, HETERO, n=4))

    assert total(Regime.VER) < total(Regime.NOVER) < total(Regime.SYNC)


def test_env_experience_is_independent_of_scheduling():
    """Same env, same snapshot: trajectories agree on their common prefix whatever the latencies."""
    fast = _virtual_rollouts(Regime.VER, LatencyModel(base=0.001), n=1, task="delayed_cue", horizon=4)[0][0]
    slow = _virtual_rollouts(Regime.VER, HETERO, n=1, task="delayed_cue", horizon=4)[0][0]
    for e in range(8):
        a = np.flatnonzero(fast.env_index == e)
        b = np.flatnonzero(slow.env_index == e)
        k = min(len(a), len(b))
        assert k > 0
        np.testing.assert_array_equal(fast.obs[a[:k]], slow.obs[b[:k]])
        np.testing.assert_array_equal(fast.actions[a[:k]], slow.actions[b[:k]])
        np.testing.assert_array_equal(fast.rewards[a[:k]], slow.rewards[b[:k]])
        np.testing.assert_allclose(fast.log_probs[a[:k]], slow.log_probs[b[:k]], rtol=0, atol=1e-12)


def test_two_speed_envs_split_steps_two_to_one():
    lat = LatencyModel(base=0.002, env_scales=(1.0, 2.0))
    fast = slow = 0
    for _, rec in _virtual_rollouts(Regime.VER, lat, n=20):
        fast += sum(rec.per_env_counts[0::2])
        slow += sum(rec.per_env_counts[1::2])
    assert 1.5 <= fast / slow <= 2.5


def test_virtual_collection_is_deterministic():
    a = _virtual_rollouts(Regime.VER, HETERO, n=2, seed=4)
    b = _virtual_rollouts(Regime.VER, HETERO, n=2, seed=4)
    for (va, ra), (vb, rb) in zip(a, b):
        np.testing.assert_array_equal(va.actions, vb.actions)
        assert ra.per_env_counts == rb.per_env_counts and ra.wall_time == rb.wall_time


def test_mailbox_delivers_everything_in_order():
    box = Mailbox()
    assert box.take(0.0) == []
    t0 = time.perf_counter()
    assert box.take(0.02) == []
    assert time.perf_counter() - t0 >= 0.015
    box.put(1)
    box.put(2)
    assert len(box) == 2
    assert box.take() == [1, 2]

    received: list[int] = []

    def consume():
        while len(received) < 3000:
            received.extend(box.take(1.0))

    c = threading.Thread(target=consume)
    c.start()
    producers = [threading.Thread(target=lambda p=p: [box.put(p * 1000 + i) for i in range(1000)])
                 for p in range(3)]
    for p in producers:
        p.start()
    for p in producers:
        p.join()
    c.join(timeout=10)
    assert sorted(received) == list(range(3000))
    for p in range(3):
        mine = [x for x in received if x // 1000 == p]
        assert mine == sorted(mine)


def test_partition_round_robin():
    parts = partition(16, 4)
    assert parts[0] == [0, 4, 8, 12] and parts[3] == [3, 7, 11, 15]
    assert sorted(sum(parts, [])) == list(range(16))
    assert partition(3, 8) == [[0], [1], [2]]


@pytest.mark.parametrize("regime", [Regime.VER, Regime.SYNC])
def test_real_clock_rollout(regime):
    cores, snap = _cores(regime, LatencyModel(base=0.001, jitter_sigma=0.3), num_envs=4, steps=8)
    core = cores[0]
    with RealClockCollector(core, BatchingPolicy.for_regime(regime, 4), num_workers=2) as coll:
        for v in range(3):
            view, rec = coll.collect(PolicySnapshot(v, snap.params))
            assert view.size == 32
            assert rec.wall_time > 0
            if regime is Regime.SYNC:
                assert rec.per_env_counts == [8] * 4
    assert not any(w.is_alive() for w in coll.workers)


def test_real_clock_worker_failure_surfaces():
    cores, snap = _cores(Regime.VER, LatencyModel(base=0.001), num_envs=2, steps=4)
    core = cores[0]

    def boom(e, action):
        raise ValueError("env exploded")

    core.env_step = boom
    with RealClockCollector(core, BatchingPolicy(1, 2), num_workers=1) as coll:
        with pytest.raises(RuntimeError, match="env exploded"):
            coll.collect(snap)


def test_real_clock_watchdog():
    cores, snap = _cores(Regime.VER, LatencyModel(base=0.001), num_envs=2, steps=4)
    coll = RealClockCollector(cores[0], BatchingPolicy(1, 2), num_workers=1, watchdog=0.2)
    coll.workers[0].inbox.put = lambda item: None  # actions vanish
    try:
        with pytest.raises(RolloutStalledError, match="no env result"):
            coll.collect(snap)
    finally:
        del coll.workers[0].inbox.put
        coll.shutdown()


def test_overlap_trains_one_policy_version_behind():
    cfg = small_config(updates=4)
    cfg.run.overlap = True
    with ReplicaGroup(cfg.validate(), seed=0) as group:
        recs = group.train()
    assert len(recs) == 4
    assert recs[0].policy_lag == 0
    assert all(r.policy_lag == 1 for r in recs[1:])
    assert all(s > 0 for r in recs[1:] for s in r.stale_steps)
