"""Builders shared by several test modules."""

from __future__ import annotations

import numpy as np

from verlite.rollout import RolloutView, SequenceDescriptor


def make_view(lengths: list[int], capacity: int | None = None, hidden: int = 3, obs_dim: int = 2,
              seed: int = 0, num_actions: int = 2, terminal: bool = False) -> RolloutView:
    """A view with one sequence per env and random observations/actions.

    With ``terminal`` every sequence ends its episode; otherwise each is
    truncated and bootstrapped from a random value.
    """
    gen = np.random.default_rng(seed)
    n = sum(lengths)
    seqs = []
    off = 0
    for k, length in enumerate(lengths):
        seqs.append(SequenceDescriptor(k, k, length, off, gen.standard_normal(hidden)))
        off += length
    env = np.repeat(np.arange(len(lengths)), lengths)
    dones = np.zeros(n, bool)
    if terminal:
        dones[np.cumsum(lengths) - 1] = True
    return RolloutView(
        obs=gen.standard_normal((n, obs_dim)), actions=gen.integers(0, num_actions, n).astype(float),
        log_probs=-np.ones(n), values=gen.standard_normal(n), rewards=gen.standard_normal(n), dones=dones,
        env_index=env, episode_id=np.zeros(n, np.int64), t=np.zeros(n, np.int64),
        version=np.zeros(n, np.int64), latency=np.zeros(n), stale=np.zeros(n, bool), sequences=seqs,
        bootstrap=gen.standard_normal(len(lengths)), num_envs=len(lengths), capacity=capacity or n)


def ppo_gradient_error(policy_cfg, params, view, ctrl, ppo_cfg, h: float = 1e-5) -> float:
    """Relative error between the tape gradient of the PPO loss and central differences.

    The finite-difference objective holds detached quantities at their values:
    the behaviour log-probs are set far below the current ones so the IS
    weight sits at its cap, and the entropy term is differentiated as
    ``-alpha * H`` (its ``alpha * (target - sg(H))`` half has no parameter
    gradient by construction).
    """
    from gradcheck import numeric_grad, rel_error
    from verlite import learner
    from verlite.nncore import autodiff as ad
    from verlite.nncore.policy import as_tensors
    from verlite.packseq import pack, split_minibatches

    view.log_probs[:] = -50.0
    table = learner.compute_gae(view, gamma=ppo_cfg.gamma, lam=ppo_cfg.gae_lambda)
    (group,) = split_minibatches(view, 1, 0)
    batch = pack(group)
    old = learner.recompute_log_probs(policy_cfg, params, view) + 0.03 * np.sin(np.arange(view.size))

    def run(p, grad: bool):
        tp = as_tensors(p, requires_grad=grad)
        return tp, learner.ppo_loss(policy_cfg, tp, batch, batch.h0, old, table.advantages, table.returns,
                                    ctrl, ppo_cfg)

    tp, res = run(params, True)
    ad.backward(res.loss)

    def objective() -> float:
        s = run(params, False)[1].stats
        return s["policy_loss"] + ppo_cfg.value_coef * s["value_loss"] - ctrl.alpha * s["entropy"]

    analytic = np.concatenate([(tp[k].grad if tp[k].grad is not None else np.zeros_like(v)).ravel()
                               for k, v in params.items()])
    numeric = np.concatenate([numeric_grad(objective, v, h).ravel() for v in params.values()])
    return rel_error(analytic, numeric)


def gae_double_sum(rewards, values, done_last: bool, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """Advantages as the explicit sum over TD errors, one sequence."""
    n = len(rewards)
    nxt = np.append(values[1:], 0.0 if done_last else bootstrap)
    deltas = rewards + gamma * nxt - values
    return np.array([sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, n)) for t in range(n)])


def brute_force_time(tau, s: int, replica_of=None, env_cap=None, replica_cap=None) -> float:
    """Earliest t with sum over replicas of min(replica_cap, sum_i min(env_cap, floor(t / tau_i))) >= s."""
    tau = np.asarray(tau, dtype=np.float64)
    replica_of = np.zeros(len(tau), np.int64) if replica_of is None else np.asarray(replica_of)
    limit = s if env_cap is None else min(s, env_cap)
    candidates = np.unique(np.concatenate([tau * k for k in range(1, limit + 1)]))
    for t in candidates:
        done = np.minimum(np.floor(t / tau + 1e-12), np.inf if env_cap is None else env_cap)
        total = 0.0
        for r in np.unique(replica_of):
            got = done[replica_of == r].sum()
            total += got if replica_cap is None else min(got, replica_cap)
        if total >= s:
            return float(t)
    raise ValueError("unreachable step count")


def brute_force_best_steps(tau, learn_time: float, s_max: int, **caps) -> int:
    values = [s / (brute_force_time(tau, s, **caps) + learn_time) for s in range(1, s_max + 1)]
    return int(np.argmax(values)) + 1


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and remember one acceptance verdict line."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} -- {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line, flush=True)
