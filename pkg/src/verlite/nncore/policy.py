"""Recurrent actor-critic: dense tanh encoder, one GRU layer, policy and value heads.

Two forward paths share the same parameters:

* :func:`forward_packed` builds a tape graph over a packed mini-batch and is
  what the learner differentiates;
* :func:`step` runs batched single-step inference during collection through
  a fused kernel, with no graph bookkeeping.

Both use the same GRU convention (gates ``r, z, n``; ``h' = (1-z)*n + z*h``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from verlite import kernels
from verlite.nncore import autodiff as ad

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))


class NonFiniteInputError(ValueError):
    """Raised when a forward pass receives NaN or infinite inputs."""


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int
    discrete: bool = True
    num_actions: int = 2
    action_dim: int = 2
    encoder_size: int = 64
    hidden_size: int = 64
    log_std_init: float = 0.0

    def __post_init__(self) -> None:
        for name in ("obs_dim", "encoder_size", "hidden_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.discrete and self.num_actions < 2:
            raise ValueError("a discrete policy needs at least 2 actions")
        if not self.discrete and self.action_dim < 1:
            raise ValueError("a continuous policy needs action_dim >= 1")

    @property
    def head_size(self) -> int:
        return self.num_actions if self.discrete else self.action_dim

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


Params = dict[str, np.ndarray]


def param_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    e, h, a = cfg.encoder_size, cfg.hidden_size, cfg.head_size
    shapes: dict[str, tuple[int, ...]] = {
        "enc_w1": (cfg.obs_dim, e), "enc_b1": (e,),
        "enc_w2": (e, e), "enc_b2": (e,),
        "gru_wi": (e, 3 * h), "gru_bi": (3 * h,),
        "gru_wh": (h, 3 * h), "gru_bh": (3 * h,),
        "pi_w": (h, a), "pi_b": (a,),
        "v_w": (h, 1), "v_b": (1,),
    }
    if not cfg.discrete:
        shapes["log_std"] = (a,)
    return shapes


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(cfg: PolicyConfig, rng: np.random.Generator | int | None = None) -> Params:
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    h = cfg.hidden_size
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "log_std":
            params[name] = np.full(shape, cfg.log_std_init)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name in ("gru_wi", "gru_wh"):
            # each gate block gets its own orthogonal matrix
            params[name] = np.concatenate(
                [orthogonal((shape[0], h), 1.0, gen) for _ in range(3)], axis=1)
        elif name == "pi_w":
            params[name] = orthogonal(shape, 0.01, gen)
        else:
            params[name] = orthogonal(shape, 1.0, gen)
    return {k: np.ascontiguousarray(v) for k, v in params.items()}


def zero_params(cfg: PolicyConfig) -> Params:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def check_params(cfg: PolicyConfig, params: Params) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise KeyError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise NonFiniteInputError(f"{name} has non-finite entries")


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError(f"{name} contains NaN or inf")


# -- distributions over tape tensors ------------------------------------------

class Categorical:
    def __init__(self, logits: ad.Tensor) -> None:
        self.logits = logits

    def log_prob(self, actions: np.ndarray) -> ad.Tensor:
        return ad.categorical_log_prob(self.logits, np.asarray(actions, dtype=np.int64))

    def entropy(self) -> ad.Tensor:
        return ad.categorical_entropy(self.logits)


class DiagGaussian:
    def __init__(self, mean: ad.Tensor, log_std: ad.Tensor) -> None:
        self.mean = mean
        self.log_std = log_std

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.value)

    def log_prob(self, actions: np.ndarray) -> ad.Tensor:
        return ad.gaussian_log_prob(self.mean, self.log_std, actions)

    def entropy(self) -> ad.Tensor:
        return ad.gaussian_entropy(self.log_std, self.mean.shape[0])


ActionDistribution = Categorical | DiagGaussian


@dataclass
class PackedOutput:
    dist: ActionDistribution
    values: ad.Tensor
    hidden: ad.Tensor


def as_tensors(params: Params, requires_grad: bool = True) -> dict[str, ad.Tensor]:
    if requires_grad:
        return {k: ad.param(v, k) for k, v in params.items()}
    return {k: ad.Tensor(v) for k, v in params.items()}


def forward_packed(cfg: PolicyConfig, tp: dict[str, ad.Tensor], obs: np.ndarray,
                   batch_sizes: np.ndarray, h0: ad.Tensor | np.ndarray,
                   reference_gru: bool = False) -> PackedOutput:
    """Tape forward over a packed (time-major) batch.

    ``obs`` rows are in packed order; ``h0`` has one row per sequence, sorted
    by length descending like the packing itself.
    """
    _check_finite("observations", obs)
    h0t = ad.const(h0)
    _check_finite("initial state", h0t.value)
    x = ad.dense(obs, tp["enc_w1"], tp["enc_b1"], "tanh")
    x = ad.dense(x, tp["enc_w2"], tp["enc_b2"], "tanh")
    xproj = ad.dense(x, tp["gru_wi"], tp["gru_bi"])
    gru = ad.gru_packed_reference if reference_gru else ad.gru_packed
    out = gru(xproj, tp["gru_wh"], tp["gru_bh"], h0t, batch_sizes)
    head = ad.dense(out, tp["pi_w"], tp["pi_b"])
    values = ad.sum(ad.dense(out, tp["v_w"], tp["v_b"]), axis=1)
    if cfg.discrete:
        dist: ActionDistribution = Categorical(head)
    else:
        dist = DiagGaussian(head, ad.clip(tp["log_std"], LOG_STD_MIN, LOG_STD_MAX))
    return PackedOutput(dist, values, out)


def final_states(hidden: np.ndarray, batch_sizes: np.ndarray) -> np.ndarray:
    """Last hidden state of each packed sequence (column order)."""
    bs = np.asarray(batch_sizes, dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(bs)[:-1]))
    k = int(bs[0])
    lengths = (bs[None, :] > np.arange(k)[:, None]).sum(axis=1)
    return hidden[starts[lengths - 1] + np.arange(k)]


# -- inference path ------------------------------------------------------------

@dataclass
class StepOutput:
    """Per-env head outputs for one inference batch."""

    head: np.ndarray
    values: np.ndarray
    hidden: np.ndarray
    log_std: np.ndarray | None


def step(cfg: PolicyConfig, params: Params, obs: np.ndarray, h: np.ndarray) -> StepOutput:
    """One recurrent step for a batch of observations (fused kernel)."""
    if not math.isfinite(float(obs.sum())):
        raise NonFiniteInputError("observations contain NaN or inf")
    head, values, h_new = kernels.policy_step(
        np.ascontiguousarray(obs, dtype=np.float64), np.ascontiguousarray(h, dtype=np.float64),
        params["enc_w1"], params["enc_b1"], params["enc_w2"], params["enc_b2"],
        params["gru_wi"], params["gru_bi"], params["gru_wh"], params["gru_bh"],
        params["pi_w"], params["pi_b"], params["v_w"], params["v_b"])
    log_std = None
    if not cfg.discrete:
        log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return StepOutput(head, values, h_new, log_std)


def noise_width(cfg: PolicyConfig) -> int:
    """Random numbers consumed per env per action."""
    return 1 if cfg.discrete else cfg.action_dim


def sample(cfg: PolicyConfig, out: StepOutput, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Actions and their log-probs from pre-drawn per-env noise.

    Discrete policies take one U(0,1) draw per env (inverse CDF); continuous
    ones take ``action_dim`` standard normals.
    """
    if cfg.discrete:
        return kernels.categorical_sample(out.head, np.ascontiguousarray(noise[:, 0]))
    assert out.log_std is not None
    actions = out.head + np.exp(out.log_std) * noise
    return actions, gaussian_log_prob_np(out.head, out.log_std, actions)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gaussian_log_prob_np(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    zsq = ((actions - mean) / np.exp(log_std)) ** 2
    return (-0.5 * zsq - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def gaussian_entropy_np(log_std: np.ndarray) -> float:
    return float(log_std.sum() + 0.5 * log_std.size * (1.0 + _LOG_2PI))


def mode(cfg: PolicyConfig, out: StepOutput) -> np.ndarray:
    """Greedy action: argmax logit or the Gaussian mean."""
    return out.head.argmax(axis=1) if cfg.discrete else out.head.copy()
