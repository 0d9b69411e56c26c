"""Pure numpy implementations of the hot kernels.

These are the reference semantics for ``_kernels.pyx`` and are used whenever the
compiled extension is unavailable (or ``VERLITE_PURE_PYTHON=1`` is set).
Array layouts are identical between the two backends.
"""

from __future__ import annotations

import numpy as np


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    offsets: np.ndarray,
    lengths: np.ndarray,
    bootstrap: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    adv = np.zeros_like(values, dtype=np.float64)
    for k in range(len(offsets)):
        start = int(offsets[k])
        next_value = float(bootstrap[k])
        next_adv = 0.0
        for i in range(start + int(lengths[k]) - 1, start - 1, -1):
            nonterminal = 0.0 if dones[i] else 1.0
            delta = rewards[i] + gamma * next_value * nonterminal - values[i]
            next_adv = delta + gamma * lam * nonterminal * next_adv
            adv[i] = next_adv
            next_value = values[i]
    return adv, adv + values


def pack_index(offsets: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Time-major gather index for sequences already sorted by length (descending)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    if len(lengths) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    max_len = int(lengths[0])
    steps = np.arange(max_len)
    batch_sizes = (lengths[None, :] > steps[:, None]).sum(axis=1).astype(np.int64)
    flat = np.empty(int(lengths.sum()), dtype=np.int64)
    pos = 0
    for t in range(max_len):
        bs = int(batch_sizes[t])
        flat[pos : pos + bs] = offsets[:bs] + t
        pos += bs
    return batch_sizes, flat


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_forward(
    xproj: np.ndarray,
    w_hh: np.ndarray,
    b_hh: np.ndarray,
    h0: np.ndarray,
    batch_sizes: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Packed GRU recurrence.

    Returns ``(out, hprev, r, z, n, hn)``; everything except ``out`` is cache for
    :func:`gru_backward`. ``hn`` is the recurrent part of the candidate gate
    (``h @ W_hn + b_hn``) before the reset gate is applied.
    """
    hidden = w_hh.shape[0]
    steps = xproj.shape[0]
    out = np.empty((steps, hidden))
    hprev = np.empty((steps, hidden))
    r = np.empty((steps, hidden))
    z = np.empty((steps, hidden))
    n = np.empty((steps, hidden))
    hn = np.empty((steps, hidden))
    pos = 0
    prev = 0
    for t, bs in enumerate(batch_sizes):
        bs = int(bs)
        rows = slice(pos, pos + bs)
        h = h0[:bs] if t == 0 else out[prev : prev + bs]
        gh = h @ w_hh + b_hh
        x = xproj[rows]
        r_t = _sigmoid(x[:, :hidden] + gh[:, :hidden])
        z_t = _sigmoid(x[:, hidden : 2 * hidden] + gh[:, hidden : 2 * hidden])
        hn_t = gh[:, 2 * hidden :]
        n_t = np.tanh(x[:, 2 * hidden :] + r_t * hn_t)
        hprev[rows] = h
        r[rows] = r_t
        z[rows] = z_t
        n[rows] = n_t
        hn[rows] = hn_t
        out[rows] = (1.0 - z_t) * n_t + z_t * h
        prev = pos
        pos += bs
    return out, hprev, r, z, n, hn


def gru_backward(
    dout: np.ndarray,
    w_hh: np.ndarray,
    batch_sizes: np.ndarray,
    hprev: np.ndarray,
    r: np.ndarray,
    z: np.ndarray,
    n: np.ndarray,
    hn: np.ndarray,
    num_seqs: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(d_xproj, d_w_hh, d_b_hh, d_h0)`` of the packed recurrence."""
    hidden = w_hh.shape[0]
    steps = dout.shape[0]
    dxproj = np.empty((steps, 3 * hidden))
    dw = np.zeros_like(w_hh)
    db = np.zeros(3 * hidden)
    carry = np.zeros((num_seqs, hidden))
    starts = np.concatenate(([0], np.cumsum(batch_sizes)[:-1])).astype(np.int64)
    for t in range(len(batch_sizes) - 1, -1, -1):
        bs = int(batch_sizes[t])
        rows = slice(int(starts[t]), int(starts[t]) + bs)
        dh = dout[rows] + carry[:bs]
        z_t, n_t, r_t = z[rows], n[rows], r[rows]
        h = hprev[rows]
        dn_pre = dh * (1.0 - z_t) * (1.0 - n_t * n_t)
        dz_pre = dh * (h - n_t) * z_t * (1.0 - z_t)
        dr_pre = dn_pre * hn[rows] * r_t * (1.0 - r_t)
        dgh = np.concatenate((dr_pre, dz_pre, dn_pre * r_t), axis=1)
        dxproj[rows, :hidden] = dr_pre
        dxproj[rows, hidden : 2 * hidden] = dz_pre
        dxproj[rows, 2 * hidden :] = dn_pre
        dw += h.T @ dgh
        db += dgh.sum(axis=0)
        carry[:bs] = dh * z_t + dgh @ w_hh.T
    return dxproj, dw, db, carry


def policy_step(obs: np.ndarray, h: np.ndarray, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray,
                b2: np.ndarray, wi: np.ndarray, bi: np.ndarray, wh: np.ndarray, bh: np.ndarray,
                pw: np.ndarray, pb: np.ndarray, vw: np.ndarray, vb: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One encoder + GRU + heads step for a batch; returns (head, values, new hidden)."""
    hs = wh.shape[0]
    x = np.tanh(obs @ w1 + b1)
    x = np.tanh(x @ w2 + b2)
    gi = x @ wi + bi
    gh = h @ wh + bh
    r = _sigmoid(gi[:, :hs] + gh[:, :hs])
    z = _sigmoid(gi[:, hs : 2 * hs] + gh[:, hs : 2 * hs])
    n = np.tanh(gi[:, 2 * hs :] + r * gh[:, 2 * hs :])
    h_new = (1.0 - z) * n + z * h
    head = h_new @ pw + pb
    values = (h_new @ vw + vb)[:, 0]
    return head, values, h_new


def categorical_sample(logits: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF draw per row from ``softmax(logits)`` with uniforms ``u``; returns (actions, log-probs)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    cdf = np.cumsum(np.exp(logp), axis=1)
    actions = np.minimum((cdf < u[:, None]).sum(axis=1), logits.shape[1] - 1).astype(np.int64)
    return actions, logp[np.arange(len(actions)), actions]


class StepKernel:
    """Reusable single-step inference over a gathered subset of env rows.

    ``load`` binds parameters, ``run`` forwards the rows ``batch`` of ``obs``
    and ``h`` into the first ``len(batch)`` rows of ``head``, ``values`` and
    ``hidden``, and ``sample`` draws categorical actions from those heads into
    ``actions`` and ``log_probs``. Outputs are overwritten by the next call.
    """

    def __init__(self, max_batch: int, obs_dim: int, enc: int, hidden: int, head: int) -> None:
        self.max_batch = max_batch
        self.head = np.zeros((max_batch, head))
        self.values = np.zeros(max_batch)
        self.hidden = np.zeros((max_batch, hidden))
        self.actions = np.zeros(max_batch, dtype=np.int64)
        self.log_probs = np.zeros(max_batch)
        self._params: tuple[np.ndarray, ...] | None = None

    def load(self, *params: np.ndarray) -> None:
        if len(params) != 12:
            raise ValueError("expected 12 parameter arrays")
        self._params = params

    def run(self, batch: list[int], obs: np.ndarray, h: np.ndarray) -> int:
        if self._params is None:
            raise RuntimeError("load() parameters first")
        nb = len(batch)
        if nb > self.max_batch:
            raise ValueError(f"batch of {nb} exceeds max_batch {self.max_batch}")
        head, values, h_new = policy_step(obs[batch], h[batch], *self._params)
        self.head[:nb] = head
        self.values[:nb] = values
        self.hidden[:nb] = h_new
        return nb

    def sample(self, nb: int, u: np.ndarray) -> None:
        actions, logp = categorical_sample(self.head[:nb], u[:nb])
        self.actions[:nb] = actions
        self.log_probs[:nb] = logp

