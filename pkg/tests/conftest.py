from __future__ import annotations

import numpy as np
import pytest

from verlite.config import RunConfig
from verlite.envsim import LatencyModel, make_env, TaskSpec
from verlite.nncore.policy import PolicyConfig, init_params
from verlite.rollout import RolloutBuffer, StepRecord


def small_config(task: str = "delayed_cue", regime: str = "ver", updates: int = 3, num_envs: int = 4,
                 steps_per_env: int = 16, virtual: bool = True, hidden: int = 16, **task_params) -> RunConfig:
    cfg = RunConfig()
    cfg.task.name = task
    cfg.task.params = dict(task_params)
    cfg.run.regime = regime
    cfg.run.num_updates = updates
    cfg.run.virtual_clock = virtual
    cfg.run.warmup_updates = 0
    cfg.rollout.num_envs = num_envs
    cfg.rollout.steps_per_env = steps_per_env
    cfg.latency.base = 0.002
    cfg.latency.episode_sigma = 0.75
    cfg.latency.jitter_sigma = 0.5
    cfg.policy.hidden_size = hidden
    cfg.policy.encoder_size = hidden
    return cfg.validate()


def make_record(env: int, t: int, done: bool = False, episode: int = 0, obs_dim: int = 2,
                hidden: int = 3, reward: float = 0.0, value: float = 0.0) -> StepRecord:
    return StepRecord(env, episode, t, np.full(obs_dim, float(t)), env % 2, -0.5, value, reward, done,
                      np.full(hidden, 0.1 * env))


def fill_buffer(buf: RolloutBuffer, order: list[int], dones: set[tuple[int, int]] = frozenset()) -> None:
    """Commit one step per entry of ``order`` (env ids); ``dones`` holds (env, t) pairs ending episodes."""
    t = [0] * buf.num_envs
    ep = [0] * buf.num_envs
    for e in order:
        done = (e, t[e]) in dones
        buf.append_step(make_record(e, t[e], done, ep[e], buf.obs_dim, buf.hidden_size))
        if done:
            ep[e] += 1
        t[e] += 1


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_policy() -> tuple[PolicyConfig, dict[str, np.ndarray]]:
    cfg = PolicyConfig(obs_dim=3, num_actions=3, encoder_size=8, hidden_size=6)
    params = init_params(cfg, 0)
    gen = np.random.default_rng(7)
    # break the orthogonal/zero-bias structure so every parameter matters
    return cfg, {k: v + 0.2 * gen.standard_normal(v.shape) for k, v in params.items()}


@pytest.fixture
def gaussian_policy() -> tuple[PolicyConfig, dict[str, np.ndarray]]:
    cfg = PolicyConfig(obs_dim=4, discrete=False, action_dim=2, encoder_size=8, hidden_size=5)
    params = init_params(cfg, 1)
    gen = np.random.default_rng(8)
    return cfg, {k: v + 0.2 * gen.standard_normal(v.shape) for k, v in params.items()}


def env_for(name: str, seed: int = 0, index: int = 0, latency: LatencyModel | None = None, **params):
    return make_env(TaskSpec(name, params), latency or LatencyModel(), seed, index)


def pytest_terminal_summary(terminalreporter) -> None:
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
