"""Recurrent PPO over packed mini-batches.

Loss per mini-batch (means over steps)::

    policy  = -mean(w * min(rho * A, clip(rho, 1-eps, 1+eps) * A))
    value   = value_coef * mean(0.5 * (V - R)^2)
    entropy = alpha * (target - sg(H)) - sg(alpha) * H

``rho`` is the ratio against the update-start policy and ``w`` the truncated
importance weight ``min(cap, pi / pi_behaviour)`` against the log-prob stored at
collection time (detached). The entropy coefficient ``alpha`` is a Lagrange
multiplier for ``H >= target``: it moves along ``target - H`` (rising while the
entropy is below target) and is clamped to its bounds after every step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from verlite import kernels
from verlite.nncore import autodiff as ad
from verlite.nncore.optim import Adam
from verlite.nncore.policy import Params, PolicyConfig, as_tensors, final_states, forward_packed
from verlite.packseq import PackedBatch, SequenceGroup, pack, split_minibatches
from verlite.rollout import RolloutView, SequenceDescriptor

log = logging.getLogger(__name__)

GradDict = dict[str, np.ndarray]
Allreduce = Callable[[GradDict], GradDict]
ALPHA_KEY = "__alpha__"


class MissingBootstrapError(ValueError):
    """A truncated sequence has no bootstrap value."""


class NonFiniteLossError(RuntimeError):
    """A loss term turned NaN or infinite; the update is aborted."""


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    epochs: int = 3
    num_minibatches: int = 2
    value_coef: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    use_importance_sampling: bool = True
    is_cap: float = 1.0
    lr: float = 2.5e-4
    adam_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.num_minibatches < 1:
            raise ValueError("epochs and num_minibatches must be >= 1")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.is_cap <= 0:
            raise ValueError("is_cap must be positive")


@dataclass
class AdvantageTable:
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(view: RolloutView, values: np.ndarray | None = None, bootstrap: np.ndarray | None = None,
                gamma: float = 0.99, lam: float = 0.95) -> AdvantageTable:
    """Per-sequence GAE; the bootstrap only enters at non-terminal sequence ends."""
    values = view.values if values is None else np.asarray(values, dtype=np.float64)
    bootstrap = view.bootstrap if bootstrap is None else np.asarray(bootstrap, dtype=np.float64)
    if values.shape != (view.size,):
        raise ValueError(f"need {view.size} values, got shape {values.shape}")
    if bootstrap.shape != (view.num_sequences,):
        raise ValueError(f"need {view.num_sequences} bootstrap values, got shape {bootstrap.shape}")
    offsets = view.seq_offsets
    lengths = view.seq_lengths
    truncated = ~view.dones[offsets + lengths - 1]
    bad = truncated & ~np.isfinite(bootstrap)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise MissingBootstrapError(f"sequence {view.sequences[k].sequence_id} (env "
                                    f"{view.sequences[k].env_index}) is truncated but has no bootstrap value")
    boot = np.where(truncated, bootstrap, 0.0)
    adv, ret = kernels.gae(np.ascontiguousarray(view.rewards, dtype=np.float64),
                           np.ascontiguousarray(values), view.dones, offsets, lengths,
                           np.ascontiguousarray(boot), gamma, lam)
    return AdvantageTable(adv, ret)


@dataclass
class EntropyController:
    """Learned entropy coefficient with its own Adam state."""

    alpha: float = 1e-3
    target: float = 0.0
    min_alpha: float = 1e-4
    max_alpha: float = 1.0
    lr: float = 2.5e-4
    _opt: Adam = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 < self.min_alpha <= self.max_alpha:
            raise ValueError("entropy bounds must satisfy 0 < min <= max")
        self.alpha = float(np.clip(self.alpha, self.min_alpha, self.max_alpha))
        self._opt = Adam({"alpha": np.zeros(1)}, lr=self.lr, eps=1e-8)

    def alpha_grad(self, entropy: float) -> float:
        """d(entropy loss)/d(alpha) = target - H."""
        return self.target - float(entropy)

    def step(self, alpha_grad: float) -> float:
        # ascent: alpha grows while the constraint H >= target is violated
        p = self._opt.step({"alpha": np.array([self.alpha])}, {"alpha": np.array([-alpha_grad])})
        self.alpha = float(np.clip(p["alpha"][0], self.min_alpha, self.max_alpha))
        return self.alpha

    def state_dict(self) -> dict[str, Any]:
        s = self._opt.state_dict()
        return {"alpha": self.alpha, "target": self.target, "min_alpha": self.min_alpha,
                "max_alpha": self.max_alpha, "lr": self.lr, "step_count": s["step_count"],
                "m": float(s["m"]["alpha"][0]), "v": float(s["v"]["alpha"][0])}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.alpha = float(state["alpha"])
        self.target = float(state["target"])
        self.min_alpha = float(state["min_alpha"])
        self.max_alpha = float(state["max_alpha"])
        self.lr = float(state["lr"])
        self._opt = Adam({"alpha": np.zeros(1)}, lr=self.lr, eps=1e-8)
        self._opt.step_count = int(state["step_count"])
        self._opt.m["alpha"][0] = state["m"]
        self._opt.v["alpha"][0] = state["v"]


def entropy_loss(entropy: ad.Tensor, ctrl: EntropyController) -> tuple[ad.Tensor, float]:
    """Returns the loss (policy gradient ``-alpha * dH``) and its gradient wrt alpha."""
    h = ad.mean(entropy)
    h_sg = float(h.value)
    loss = ad.add(ctrl.alpha * (ctrl.target - h_sg), ad.mul(-ctrl.alpha, h))
    return loss, ctrl.alpha_grad(h_sg)


@dataclass
class LossOutput:
    loss: ad.Tensor
    alpha_grad: float
    stats: dict[str, float]


def ppo_loss(policy_cfg: PolicyConfig, tp: dict[str, ad.Tensor], batch: PackedBatch, h0: np.ndarray,
             old_log_probs: np.ndarray, advantages: np.ndarray, returns: np.ndarray,
             ctrl: EntropyController, cfg: PPOConfig) -> LossOutput:
    """Loss on one packed mini-batch.

    ``old_log_probs``, ``advantages`` and ``returns`` are view-ordered; the
    behaviour log-prob comes from the view itself.
    """
    view = batch.group.view
    idx = batch.index
    out = forward_packed(policy_cfg, tp, view.obs[idx], batch.batch_sizes, h0)
    logp = out.dist.log_prob(view.actions[idx])
    adv = advantages[idx]
    ratio = ad.exp(ad.sub(logp, old_log_probs[idx]))
    surr = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv))
    if cfg.use_importance_sampling:
        weights = np.minimum(cfg.is_cap, np.exp(logp.value - view.log_probs[idx]))
    else:
        weights = np.ones(len(idx))
    policy_loss = ad.neg(ad.mean(ad.mul(surr, weights)))
    value_loss = ad.mean(ad.mul(ad.square(ad.sub(out.values, returns[idx])), 0.5))
    entropy = out.dist.entropy()
    ent_loss, alpha_grad = entropy_loss(entropy, ctrl)
    total = ad.add(ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)), ent_loss)
    terms = {"policy_loss": float(policy_loss.value), "value_loss": float(value_loss.value),
             "entropy_loss": float(ent_loss.value)}
    for name, v in terms.items():
        if not np.isfinite(v):
            raise NonFiniteLossError(f"{name} is {v}")
    r = ratio.value
    stats = {
        **terms,
        "ratio_mean": float(r.mean()),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > cfg.clip)),
        "entropy": float(entropy.value.mean()),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
        "is_weight_mean": float(weights.mean()),
        "is_weight_max": float(weights.max()),
    }
    return LossOutput(total, alpha_grad, stats)


@dataclass
class TrainStats:
    update: int
    steps: int
    num_stale: int
    ratio_mean: float
    clip_fraction: float
    entropy: float
    value_loss: float
    policy_loss: float
    approx_kl: float
    is_weight_mean: float
    is_weight_max: float
    alpha: float
    lr: float
    learn_time: float = 0.0
    replica: int = 0

    def to_json(self) -> str:
        return json.dumps({"kind": "train", **asdict(self)})


def _packed_forward_nograd(policy_cfg: PolicyConfig, params: Params, view: RolloutView,
                           seqs: list[SequenceDescriptor]) -> tuple[PackedBatch, np.ndarray, Any]:
    batch = pack(SequenceGroup(view, seqs))
    out = forward_packed(policy_cfg, as_tensors(params, requires_grad=False), view.obs[batch.index],
                         batch.batch_sizes, batch.h0)
    return batch, out.hidden.value, out


def recompute_log_probs(policy_cfg: PolicyConfig, params: Params, view: RolloutView) -> np.ndarray:
    """Log-probs of the stored actions under ``params``, view-ordered."""
    batch, _, out = _packed_forward_nograd(policy_cfg, params, view, list(view.sequences))
    result = np.empty(view.size)
    result[batch.index] = out.dist.log_prob(view.actions[batch.index]).value
    return result


def tail_states(policy_cfg: PolicyConfig, params: Params, batches: list[PackedBatch]) -> None:
    """Fill ``h0`` of split tails from a no-grad forward over their heads."""
    pending: list[tuple[PackedBatch, int]] = []
    heads: list[SequenceDescriptor] = []
    for b in batches:
        for j in np.flatnonzero(b.recompute):
            s = b.sequences[int(j)]
            assert s.parent is not None
            offset, length, h0 = s.parent
            heads.append(SequenceDescriptor(s.sequence_id, s.env_index, length, offset, h0, s.stale))
            pending.append((b, int(j)))
    if not heads:
        return
    view = batches[0].group.view
    packed, hidden, _ = _packed_forward_nograd(policy_cfg, params, view, heads)
    finals = final_states(hidden, packed.batch_sizes)
    for col, (b, j) in zip(range(len(heads)), [pending[int(k)] for k in packed.order]):
        b.h0[j] = finals[col]
        b.recompute[j] = False


def update(view: RolloutView, params: Params, opt: Adam, policy_cfg: PolicyConfig, cfg: PPOConfig,
           ctrl: EntropyController, rng: np.random.Generator, update_index: int = 0,
           allreduce: Allreduce | None = None) -> tuple[Params, TrainStats]:
    """One PPO update; returns the new parameter snapshot and stats.

    Steps whose targets are still NaN get GAE from their stored values;
    backfilled steps keep the targets they were trained on before. Rows flagged
    stale use the update-start policy as ``pi_old`` (recomputed without grad).
    """
    missing = np.isnan(view.advantages)
    if missing.any():
        table = compute_gae(view, gamma=cfg.gamma, lam=cfg.gae_lambda)
        view.advantages[missing] = table.advantages[missing]
        view.returns[missing] = table.returns[missing]
    old_log_probs = view.log_probs
    if view.stale.any():
        fresh = recompute_log_probs(policy_cfg, params, view)
        old_log_probs = np.where(view.stale, fresh, view.log_probs)
    acc: dict[str, list[float]] = {}
    for _ in range(cfg.epochs):
        batches = [pack(g) for g in split_minibatches(view, cfg.num_minibatches, rng)]
        tail_states(policy_cfg, params, batches)
        for batch in batches:
            tp = as_tensors(params)
            res = ppo_loss(policy_cfg, tp, batch, batch.h0, old_log_probs, view.advantages,
                           view.returns, ctrl, cfg)
            ad.backward(res.loss)
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.value) for k, t in tp.items()}
            grads[ALPHA_KEY] = np.array([res.alpha_grad])
            if allreduce is not None:
                grads = allreduce(grads)
            alpha_grad = float(grads[ALPHA_KEY][0])
            params = opt.step(params, grads)
            ctrl.step(alpha_grad)
            for k, v in res.stats.items():
                acc.setdefault(k, []).append(v)
    stats = TrainStats(
        update=update_index,
        steps=view.size,
        num_stale=view.num_stale,
        ratio_mean=float(np.mean(acc["ratio_mean"])),
        clip_fraction=float(np.mean(acc["clip_fraction"])),
        entropy=float(np.mean(acc["entropy"])),
        value_loss=float(np.mean(acc["value_loss"])),
        policy_loss=float(np.mean(acc["policy_loss"])),
        approx_kl=float(np.mean(acc["approx_kl"])),
        is_weight_mean=float(np.mean(acc["is_weight_mean"])),
        is_weight_max=float(np.max(acc["is_weight_max"])),
        alpha=ctrl.alpha,
        lr=opt.lr,
    )
    return params, stats
