"""Synthetic environments with controllable simulation-time heterogeneity.

Every environment draws its randomness from counter-based streams keyed by
``(global_seed, env_index, episode_index)`` so a run does not depend on which
worker steps which environment, or in what order.

Environments never sleep. ``step`` returns the simulated latency and the worker
owning the environment decides whether to sleep or advance a virtual clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

_TASK_STREAM = 0
_LATENCY_STREAM = 1


class EnvUsageError(RuntimeError):
    """Raised when an environment is driven outside its contract."""


def episode_rng(global_seed: int, env_index: int, episode_index: int, stream: int) -> np.random.Generator:
    seq = np.random.SeedSequence([global_seed, env_index, episode_index, stream])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class LatencyModel:
    """Per-step latency = base * episode_scale * jitter * action_multiplier.

    ``episode_sigma`` and ``jitter_sigma`` are log-space standard deviations of
    unit-median lognormals; zero disables that source of variation.
    ``env_scales`` optionally multiplies the latency of environment ``i`` by
    ``env_scales[i % len(env_scales)]`` (used to build two-speed setups).
    """

    base: float = 0.002
    jitter_sigma: float = 0.0
    episode_sigma: float = 0.0
    action_multipliers: tuple[float, ...] = ()
    env_scales: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.base > 0:
            raise ValueError(f"latency base must be positive, got {self.base}")
        if self.jitter_sigma < 0 or self.episode_sigma < 0:
            raise ValueError("latency sigmas must be non-negative")
        if any(not m > 0 for m in self.action_multipliers):
            raise ValueError("action multipliers must be positive")
        if any(not s > 0 for s in self.env_scales):
            raise ValueError("env scales must be positive")

    def env_scale(self, env_index: int) -> float:
        if not self.env_scales:
            return 1.0
        return self.env_scales[env_index % len(self.env_scales)]

    def sample_episode_scale(self, rng: np.random.Generator) -> float:
        if self.episode_sigma == 0:
            return 1.0
        return float(rng.lognormal(0.0, self.episode_sigma))

    def sample_step(self, rng: np.random.Generator, episode_scale: float, action: Any) -> float:
        jitter = float(rng.lognormal(0.0, self.jitter_sigma)) if self.jitter_sigma > 0 else 1.0
        mult = 1.0
        if self.action_multipliers and np.ndim(action) == 0:
            mult = self.action_multipliers[int(action) % len(self.action_multipliers)]
        return self.base * episode_scale * jitter * mult

    def mean_step(self) -> float:
        """Expected latency of one step (before per-env scales and action multipliers)."""
        return self.base * math.exp(0.5 * self.episode_sigma**2) * math.exp(0.5 * self.jitter_sigma**2)


@dataclass(frozen=True)
class TaskSpec:
    """Task identifier plus its parameters.

    ``name`` is one of ``delayed_cue``, ``reach2d`` or ``latency_only``.
    """

    name: str
    params: dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any) -> Any:
        return self.params.get(key, default)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    latency: float


class Env:
    """Base environment: episode bookkeeping, seeding and latency sampling."""

    discrete: bool = True
    num_actions: int = 2
    action_dim: int = 1
    obs_dim: int = 1

    def __init__(self, latency: LatencyModel, global_seed: int = 0, env_index: int = 0) -> None:
        self.latency = latency
        self.global_seed = int(global_seed)
        self.env_index = int(env_index)
        self.episode_index = -1
        self.t = 0
        self.done = True
        self.episode_scale = 1.0
        self._task_rng: np.random.Generator | None = None
        self._lat_rng: np.random.Generator | None = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Start a new episode; passing ``seed`` rewinds the stream to episode 0."""
        if seed is not None:
            self.global_seed = int(seed)
            self.episode_index = 0
        else:
            self.episode_index += 1
        self._task_rng = episode_rng(self.global_seed, self.env_index, self.episode_index, _TASK_STREAM)
        self._lat_rng = episode_rng(self.global_seed, self.env_index, self.episode_index, _LATENCY_STREAM)
        self.episode_scale = self.latency.sample_episode_scale(self._lat_rng) * self.latency.env_scale(self.env_index)
        self.t = 0
        self.done = False
        return self._reset_task(self._task_rng)

    def step(self, action: Any) -> StepResult:
        if self.done:
            raise EnvUsageError(f"env {self.env_index}: step() on a finished episode; call reset() first")
        self._check_action(action)
        obs, reward, done = self._step_task(action)
        self.t += 1
        self.done = done
        assert self._lat_rng is not None
        lat = self.latency.sample_step(self._lat_rng, self.episode_scale, action)
        return StepResult(obs, float(reward), bool(done), lat)

    def _check_action(self, action: Any) -> None:
        if self.discrete:
            a = int(action)
            if not 0 <= a < self.num_actions:
                raise EnvUsageError(f"action {a} outside [0, {self.num_actions})")
        else:
            a = np.asarray(action, dtype=np.float64)
            if a.shape != (self.action_dim,) or not np.all(np.isfinite(a)):
                raise EnvUsageError(f"bad continuous action {action!r}")

    def _reset_task(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _step_task(self, action: Any) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class DelayedCue(Env):
    """A cue in {-1, +1} is shown at t=0 only; the last action must name it.

    Action 0 answers -1, action 1 answers +1. Reward 1 for the right answer at
    step ``horizon - 1``, 0 otherwise; earlier actions are ignored.
    """

    def __init__(self, latency: LatencyModel, global_seed: int = 0, env_index: int = 0,
                 horizon: int = 8, obs_dim: int = 2) -> None:
        super().__init__(latency, global_seed, env_index)
        if horizon < 1 or obs_dim < 1:
            raise ValueError("horizon and obs_dim must be >= 1")
        self.horizon = horizon
        self.obs_dim = obs_dim
        self.cue = 0.0

    def _reset_task(self, rng: np.random.Generator) -> np.ndarray:
        self.cue = 1.0 if rng.random() < 0.5 else -1.0
        obs = np.zeros(self.obs_dim)
        obs[0] = self.cue
        return obs

    def _step_task(self, action: Any) -> tuple[np.ndarray, float, bool]:
        if self.t == self.horizon - 1:
            answer = 1.0 if int(action) == 1 else -1.0
            return np.zeros(self.obs_dim), float(answer == self.cue), True
        return np.zeros(self.obs_dim), 0.0, False


class Reach2D(Env):
    """Point mass on [-1, 1]^2 steered by 2-D velocity actions.

    Actions are rescaled to have norm at most ``step_size``. Each step costs
    ``step_penalty``; landing within ``radius`` of the goal pays 1 and ends the
    episode. Observation is ``(agent_x, agent_y, goal_x, goal_y)``.
    """

    discrete = False
    action_dim = 2
    obs_dim = 4

    def __init__(self, latency: LatencyModel, global_seed: int = 0, env_index: int = 0,
                 max_steps: int = 32, step_size: float = 0.1, radius: float = 0.05,
                 step_penalty: float = 0.01) -> None:
        super().__init__(latency, global_seed, env_index)
        self.max_steps = max_steps
        self.step_size = step_size
        self.radius = radius
        self.step_penalty = step_penalty
        self.pos = np.zeros(2)
        self.goal = np.zeros(2)

    def _reset_task(self, rng: np.random.Generator) -> np.ndarray:
        self.pos = rng.uniform(-1.0, 1.0, size=2)
        self.goal = rng.uniform(-1.0, 1.0, size=2)
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.concatenate((self.pos, self.goal))

    def _step_task(self, action: Any) -> tuple[np.ndarray, float, bool]:
        a = np.asarray(action, dtype=np.float64)
        norm = float(np.linalg.norm(a))
        if norm > self.step_size:
            a = a * (self.step_size / norm)
        self.pos = np.clip(self.pos + a, -1.0, 1.0)
        if np.linalg.norm(self.goal - self.pos) <= self.radius:
            return self._obs(), 1.0, True
        return self._obs(), -self.step_penalty, self.t + 1 >= self.max_steps

    def steps_to_goal(self) -> int:
        """Fewest steps from the current position into the goal disc (at least 1)."""
        dist = float(np.linalg.norm(self.goal - self.pos))
        return max(1, math.ceil((dist - self.radius) / self.step_size - 1e-12))


class LatencyOnly(Env):
    """Zero reward, fixed episode length, random features; for throughput runs."""

    def __init__(self, latency: LatencyModel, global_seed: int = 0, env_index: int = 0,
                 episode_length: int = 64, obs_dim: int = 4, num_actions: int = 2) -> None:
        super().__init__(latency, global_seed, env_index)
        self.episode_length = episode_length
        self.obs_dim = obs_dim
        self.num_actions = num_actions

    def _reset_task(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.obs_dim)

    def _step_task(self, action: Any) -> tuple[np.ndarray, float, bool]:
        assert self._task_rng is not None
        return self._task_rng.standard_normal(self.obs_dim), 0.0, self.t + 1 >= self.episode_length


_TASKS: dict[str, type[Env]] = {
    "delayed_cue": DelayedCue,
    "reach2d": Reach2D,
    "latency_only": LatencyOnly,
}


def make_env(task: TaskSpec, latency: LatencyModel, global_seed: int = 0, env_index: int = 0) -> Env:
    try:
        cls = _TASKS[task.name]
    except KeyError:
        raise ValueError(f"unknown task {task.name!r}; expected one of {sorted(_TASKS)}") from None
    return cls(latency, global_seed, env_index, **task.params)


def reach2d_optimal_episode_return(steps: int, max_steps: int, penalty: float, gamma: float) -> float:
    """Return of the straight-line policy that needs ``steps`` moves to reach the goal."""
    if steps > max_steps:
        return -penalty * sum(gamma**i for i in range(max_steps))
    return -penalty * sum(gamma**i for i in range(steps - 1)) + gamma ** (steps - 1)


def optimal_return(task: TaskSpec, gamma: float = 1.0, num_seeds: int = 256) -> float:
    """Expected episode return of an optimal policy, discounted by ``gamma``.

    Reach2D averages the closed-form straight-line return over the start/goal
    draws of seeds ``0..num_seeds-1`` (env index 0).
    """
    if task.name == "delayed_cue":
        return gamma ** (task.get("horizon", 8) - 1)
    if task.name == "latency_only":
        return 0.0
    if task.name == "reach2d":
        env = make_env(task, LatencyModel(), 0, 0)
        assert isinstance(env, Reach2D)
        total = 0.0
        for seed in range(num_seeds):
            env.reset(seed=seed)
            total += reach2d_optimal_episode_return(env.steps_to_goal(), env.max_steps, env.step_penalty, gamma)
        return total / num_seeds
    raise ValueError(f"unknown task {task.name!r}")
