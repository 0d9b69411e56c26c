from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from conftest import small_config
from verlite import bench, cli, config
from verlite.distributed import IterationRecord


def _rec(update, steps, window, sps=None, times=(1.0,), ret=math.nan, total=0):
    return IterationRecord(update=update, steps=steps, total_steps=total or steps * update, window_time=window,
                           collect_time=window * 0.9, learn_time=window * 0.1,
                           sps=sps if sps is not None else steps / window, preempt_target=None, deficits=[0],
                           stale_steps=[0], rollout_times=list(times), mean_return=ret, episodes=0,
                           divergence=0.0)


def test_summarize_pools_steps_and_skips_warmup():
    recs = [_rec(1, 100, 10.0), _rec(2, 100, 1.0), _rec(3, 100, 3.0, times=(1.0, 3.0), ret=0.5)]
    s = bench.summarize(recs, warmup=1)
    assert s.updates == 2 and s.steps == 200
    assert s.mean_sps == pytest.approx(50.0)
    assert s.max_sps == pytest.approx(100.0)
    assert s.mean_over_max == pytest.approx(0.5)
    assert s.rollout_time_cv == pytest.approx(0.5)
    assert s.final_return == 0.5
    assert bench.summarize(recs[:1], warmup=5).updates == 1
    with pytest.raises(ValueError):
        bench.summarize([])


def test_return_curve_carries_forward_and_aggregates():
    recs = [_rec(1, 10, 1.0), _rec(2, 10, 1.0, ret=0.2), _rec(3, 10, 1.0), _rec(4, 10, 1.0, ret=0.8)]
    curve = bench.return_curve(recs)
    assert [s for s, _ in curve] == [10, 20, 30, 40]
    assert math.isnan(curve[0][1]) and [r for _, r in curve[1:]] == [0.2, 0.2, 0.8]
    runs = [bench.RunResult(s, "ver", 1, recs, [], 0.0) for s in range(3)]
    med = bench.median_curve(runs)
    np.testing.assert_allclose(med, [0.0, 0.2, 0.2, 0.8])
    assert bench.first_reaching(med, 0.5) == 4
    assert bench.first_reaching(med, 0.9) is None
    assert bench.normalized_auc(med, 1.0) == pytest.approx(0.3)


def test_with_overrides_copies_and_validates():
    cfg = small_config()
    out = bench.with_overrides(cfg, regime="sync", replicas=2, virtual_clock=False, seeds=[7])
    assert (out.run.regime, out.run.replicas, out.run.virtual_clock, out.run.seeds) == ("sync", 2, False, [7])
    assert cfg.run.regime == "ver"
    with pytest.raises(config.ConfigError):
        bench.with_overrides(cfg, regime="nope")


def test_bench_writes_tables(tmp_path):
    cfg = small_config(updates=2)
    rows, runs = bench.bench(cfg, [0, 1], replica_counts=[2], out_dir=tmp_path)
    assert len(rows) == 2 * 3 * 3  # replica counts x regimes x (2 seeds + mean)
    with open(tmp_path / "bench.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == bench.BENCH_COLUMNS
    sync_mean = next(r for r in rows if r.regime == "sync" and r.seed == "mean" and r.replicas == 1)
    assert sync_mean.speedup_vs_sync == pytest.approx(1.0)
    with open(tmp_path / "env_counts.csv") as fh:
        hist = list(csv.DictReader(fh))
    sync_hist = [h for h in hist if h["regime"] == "sync"]
    assert {h["steps"] for h in sync_hist} == {"16"}
    assert "mean SPS" in bench.format_table(rows)


def test_compare_curves_and_sync_determinism(tmp_path):
    cfg = small_config(updates=3)
    rows, runs = bench.compare(cfg, [0], regimes=("sync", "sync"), out_dir=tmp_path)
    with open(tmp_path / "curves.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == bench.CURVE_COLUMNS
    a, b = runs["sync"]
    assert [r.mean_return for r in a.records] == pytest.approx([r.mean_return for r in b.records], nan_ok=True)
    assert [r.total_steps for r in a.records] == [64, 128, 192]


def test_task_optimum():
    cfg = small_config(horizon=4)
    assert bench.task_optimum(cfg) == pytest.approx(1.0)


def _toml(tmp_path, **overrides):
    cfg = small_config(updates=2, **overrides)
    path = tmp_path / "cfg.toml"
    config.save(cfg, path)
    return path


def test_cli_train_outputs(tmp_path):
    path = _toml(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(path), "--seed", "3", "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["checkpoint.json", "config.toml", "metrics.jsonl", "rollouts.jsonl", "summary.json",
                     "train.jsonl"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["updates"] == 2
    assert config.load(out / "config.toml").run.seeds == [3]


def test_cli_train_multi_seed_suffixes_and_dump_replay(tmp_path, capsys):
    cfg = small_config(updates=2)
    cfg.run.dump_rollouts = True
    path = tmp_path / "cfg.toml"
    config.save(cfg, path)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(path), "--seed", "0,1", "--regime", "nover", "--out-dir",
                     str(out)]) == 0
    for s in (0, 1):
        assert (out / f"metrics-s{s}.jsonl").exists() and (out / f"checkpoint-s{s}.json").exists()
    dump = sorted((out / "dumps-s1").glob("*.jsonl"))[-1]
    capsys.readouterr()
    rc = cli.main(["replay", "--config", str(path), "--rollout", str(dump),
                   "--checkpoint", str(out / "checkpoint-s1.json")])
    report = json.loads(capsys.readouterr().out)
    assert rc == 0 and report["round_trip"] and report["steps"] == 64


def test_cli_bench_and_compare(tmp_path, capsys):
    path = _toml(tmp_path)
    assert cli.main(["bench", "--config", str(path), "--out-dir", str(tmp_path / "b")]) == 0
    assert "mean SPS" in capsys.readouterr().out
    assert (tmp_path / "b" / "bench.csv").exists()
    assert cli.main(["compare", "--config", str(path), "--seed", "0", "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "curves.csv").exists()


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nregime = 'ver'\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "task.name: required key is missing" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    path = _toml(tmp_path)
    assert cli.main(["train", "--config", str(path), "--replicas", "1,2"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["train", "--config", str(path), "--seed", "x"])
    with pytest.raises(SystemExit):
        cli.main(["fly", "--config", str(path)])


def test_log_level_from_environment(tmp_path, monkeypatch):
    import logging

    monkeypatch.setenv("VER_LOG_LEVEL", "debug")
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    root.handlers = []
    try:
        cli.main(["train", "--config", str(_toml(tmp_path)), "--out-dir", str(tmp_path / "o")])
        assert root.level == logging.DEBUG
    finally:
        root.handlers, level = saved
        root.setLevel(level)
