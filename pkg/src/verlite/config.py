"""Run configuration: a TOML file with one table per concern.

Unknown keys are rejected, missing keys take defaults, and validation reports
every violated constraint at once.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from verlite.envsim import LatencyModel, TaskSpec
from verlite.learner import PPOConfig
from verlite.nncore.policy import PolicyConfig
from verlite.runtime import Regime

PREEMPT_MODES = ("none", "optimal", "ddppo")
PREEMPT_SCOPES = ("global", "per_replica")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))


@dataclass
class RunSection:
    regime: str = "ver"
    overlap: bool = False
    replicas: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    num_updates: int = 100
    total_steps: int = 0
    virtual_clock: bool = False
    virtual_learn_time: float = 0.05
    warmup_updates: int = 2
    checkpoint_every: int = 0
    dump_rollouts: bool = False
    out_dir: str = "runs"


@dataclass
class TaskSection:
    name: str = "latency_only"
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class LatencySection:
    base: float = 0.002
    jitter_sigma: float = 0.5
    episode_sigma: float = 0.75
    action_multipliers: list[float] = field(default_factory=list)
    env_scales: list[float] = field(default_factory=list)
    replica_scales: list[float] = field(default_factory=list)


@dataclass
class RolloutSection:
    num_envs: int = 16
    steps_per_env: int = 128


@dataclass
class InferenceSection:
    min_requests: int = 1
    max_requests: int = 0
    max_wait: float = 0.002
    env_workers: int = 4
    watchdog: float = 30.0
    virtual_base: float = 1e-4
    virtual_per_item: float = 1e-5


@dataclass
class PPOSection:
    epochs: int = 3
    num_minibatches: int = 2
    clip: float = 0.2
    value_coef: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 2.5e-4
    adam_eps: float = 1e-5
    use_importance_sampling: bool = True
    is_cap: float = 1.0


@dataclass
class EntropySection:
    initial: float = 1e-3
    min: float = 1e-4
    max: float = 1.0
    target: float = 0.0
    lr: float = 2.5e-4


@dataclass
class PolicySection:
    hidden_size: int = 64
    encoder_size: int = 64
    log_std_init: float = 0.0


@dataclass
class PreemptionSection:
    mode: str = "none"
    scope: str = "global"
    ddppo_fraction: float = 0.6


_SECTIONS: dict[str, type] = {
    "run": RunSection,
    "task": TaskSection,
    "latency": LatencySection,
    "rollout": RolloutSection,
    "inference": InferenceSection,
    "ppo": PPOSection,
    "entropy": EntropySection,
    "policy": PolicySection,
    "preemption": PreemptionSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    task: TaskSection = field(default_factory=TaskSection)
    latency: LatencySection = field(default_factory=LatencySection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    ppo: PPOSection = field(default_factory=PPOSection)
    entropy: EntropySection = field(default_factory=EntropySection)
    policy: PolicySection = field(default_factory=PolicySection)
    preemption: PreemptionSection = field(default_factory=PreemptionSection)

    # -- derived objects ------------------------------------------------------

    @property
    def regime(self) -> Regime:
        return Regime(self.run.regime)

    def latency_model(self, replica: int = 0) -> LatencyModel:
        lat = self.latency
        scale = lat.replica_scales[replica % len(lat.replica_scales)] if lat.replica_scales else 1.0
        return LatencyModel(base=lat.base * scale, jitter_sigma=lat.jitter_sigma,
                            episode_sigma=lat.episode_sigma,
                            action_multipliers=tuple(lat.action_multipliers),
                            env_scales=tuple(lat.env_scales))

    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task.name, dict(self.task.params))

    def ppo_config(self) -> PPOConfig:
        p = self.ppo
        return PPOConfig(clip=p.clip, epochs=p.epochs, num_minibatches=p.num_minibatches,
                         value_coef=p.value_coef, gamma=p.gamma, gae_lambda=p.gae_lambda,
                         use_importance_sampling=p.use_importance_sampling, is_cap=p.is_cap,
                         lr=p.lr, adam_eps=p.adam_eps)

    def policy_config(self, obs_dim: int, discrete: bool, num_actions: int, action_dim: int) -> PolicyConfig:
        return PolicyConfig(obs_dim=obs_dim, discrete=discrete, num_actions=num_actions,
                            action_dim=action_dim, encoder_size=self.policy.encoder_size,
                            hidden_size=self.policy.hidden_size, log_std_init=self.policy.log_std_init)

    @property
    def updates(self) -> int:
        """Number of updates: ``run.total_steps`` (when set) rounded up to whole rollouts."""
        if self.run.total_steps > 0:
            per_update = self.rollout.num_envs * self.rollout.steps_per_env * self.run.replicas
            return -(-self.run.total_steps // per_update)
        return self.run.num_updates

    @property
    def max_requests(self) -> int:
        return self.inference.max_requests or self.rollout.num_envs

    # -- validation ----------------------------------------------------------

    def problems(self) -> list[str]:
        out: list[str] = []
        r, ro, inf, p, ent, pre = self.run, self.rollout, self.inference, self.ppo, self.entropy, self.preemption
        if r.regime not in [x.value for x in Regime]:
            out.append(f"run.regime: {r.regime!r} is not one of sync, nover, ver")
        if r.replicas < 1:
            out.append("run.replicas: must be >= 1")
        if not r.seeds:
            out.append("run.seeds: need at least one seed")
        if r.num_updates < 1:
            out.append("run.num_updates: must be >= 1")
        if r.total_steps < 0:
            out.append("run.total_steps: must be >= 0")
        if r.virtual_learn_time < 0:
            out.append("run.virtual_learn_time: must be >= 0")
        if r.warmup_updates < 0:
            out.append("run.warmup_updates: must be >= 0")
        if self.task.name not in ("delayed_cue", "reach2d", "latency_only"):
            out.append(f"task.name: unknown task {self.task.name!r}")
        lat = self.latency
        if not lat.base > 0:
            out.append("latency.base: must be > 0")
        if lat.jitter_sigma < 0 or lat.episode_sigma < 0:
            out.append("latency: sigmas must be >= 0")
        for key in ("action_multipliers", "env_scales", "replica_scales"):
            if any(not v > 0 for v in getattr(lat, key)):
                out.append(f"latency.{key}: entries must be > 0")
        if ro.num_envs < 1:
            out.append("rollout.num_envs: must be >= 1")
        if ro.steps_per_env < 1:
            out.append("rollout.steps_per_env: must be >= 1")
        if p.num_minibatches < 1:
            out.append("ppo.num_minibatches: must be >= 1")
        elif (ro.num_envs * ro.steps_per_env) % p.num_minibatches:
            out.append(f"ppo.num_minibatches: {p.num_minibatches} does not divide T*N = "
                       f"{ro.num_envs * ro.steps_per_env}")
        if p.epochs < 1:
            out.append("ppo.epochs: must be >= 1")
        if not 0 < p.clip < 1:
            out.append("ppo.clip: must lie in (0, 1)")
        if not 0 <= p.gamma <= 1:
            out.append("ppo.gamma: must lie in [0, 1]")
        if not 0 <= p.gae_lambda <= 1:
            out.append("ppo.gae_lambda: must lie in [0, 1]")
        if p.lr < 0:
            out.append("ppo.lr: must be >= 0")
        if p.is_cap <= 0:
            out.append("ppo.is_cap: must be > 0")
        if not 0 < ent.min <= ent.max:
            out.append("entropy: need 0 < min <= max")
        elif not ent.min <= ent.initial <= ent.max:
            out.append("entropy.initial: must lie within [min, max]")
        max_req = inf.max_requests or ro.num_envs
        if not 1 <= inf.min_requests <= max_req <= max(ro.num_envs, 1):
            out.append(f"inference: need 1 <= min_requests ({inf.min_requests}) <= max_requests "
                       f"({max_req}) <= num_envs ({ro.num_envs})")
        if inf.max_wait < 0:
            out.append("inference.max_wait: must be >= 0")
        if inf.env_workers < 1:
            out.append("inference.env_workers: must be >= 1")
        if inf.watchdog <= 0:
            out.append("inference.watchdog: must be > 0")
        if self.policy.hidden_size < 1 or self.policy.encoder_size < 1:
            out.append("policy: sizes must be >= 1")
        if pre.mode not in PREEMPT_MODES:
            out.append(f"preemption.mode: {pre.mode!r} is not one of {', '.join(PREEMPT_MODES)}")
        if pre.scope not in PREEMPT_SCOPES:
            out.append(f"preemption.scope: {pre.scope!r} is not one of {', '.join(PREEMPT_SCOPES)}")
        if not 0 < pre.ddppo_fraction <= 1:
            out.append("preemption.ddppo_fraction: must lie in (0, 1]")
        if pre.mode != "none" and r.regime != "ver":
            out.append("preemption.mode: preemption needs the ver regime")
        if pre.mode != "none" and r.overlap:
            out.append("preemption.mode: preemption cannot be combined with run.overlap")
        return out

    def validate(self) -> RunConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    # -- (de)serialisation ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any], require: tuple[str, ...] = ()) -> RunConfig:
        problems: list[str] = []
        for key in require:
            sect, _, name = key.partition(".")
            if sect not in doc or (name and name not in doc[sect]):
                problems.append(f"{key}: required key is missing")
        kwargs: dict[str, Any] = {}
        for sect, value in doc.items():
            if sect not in _SECTIONS:
                problems.append(f"{sect}: unknown table")
                continue
            if not isinstance(value, dict):
                problems.append(f"{sect}: expected a table")
                continue
            tp = _SECTIONS[sect]
            known = {f.name: f for f in fields(tp)}
            args = {}
            for k, v in value.items():
                if k not in known:
                    problems.append(f"{sect}.{k}: unknown key")
                    continue
                default = getattr(tp(), k)
                ok = _type_ok(default, v)
                if not ok:
                    problems.append(f"{sect}.{k}: expected {type(default).__name__}, got {type(v).__name__}")
                    continue
                args[k] = float(v) if isinstance(default, float) and not isinstance(v, bool) else v
            kwargs[sect] = tp(**args)
        if problems:
            raise ConfigError(problems)
        return cls(**kwargs)


def _type_ok(default: Any, value: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


REQUIRED_KEYS = ("run.regime", "task.name", "rollout.num_envs", "rollout.steps_per_env")


def loads(text: str, require: tuple[str, ...] = REQUIRED_KEYS) -> RunConfig:
    return RunConfig.from_dict(tomli.loads(text), require).validate()


def load(path: str | Path, require: tuple[str, ...] = REQUIRED_KEYS) -> RunConfig:
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    try:
        return RunConfig.from_dict(doc, require).validate()
    except ConfigError as exc:
        raise ConfigError([f"{path}: {p}" for p in exc.problems]) from None


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
