"""A small reverse-mode tape over numpy arrays.

Each op computes its value eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.
:func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from verlite import kernels

_LOG_2PI = float(np.log(2.0 * np.pi))


class GradientError(RuntimeError):
    """Raised for detached losses or non-finite values during differentiation."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value: np.ndarray | float, parents: Sequence[Tensor] = (),
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
                 requires_grad: bool = False, name: str | None = None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: TensorLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: TensorLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: TensorLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: TensorLike) -> Tensor:
        return matmul(self, other)


TensorLike = Tensor | np.ndarray | float


def param(value: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value: np.ndarray, parents: Sequence[Tensor],
          fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, fn, requires_grad=True)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = const(a), const(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = const(a), const(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = const(a), const(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a: Tensor) -> Tensor:
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = const(a), const(b)
    take_a = a.value <= b.value
    return _node(np.where(take_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.value)


# -- reductions and shape ops -------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.value.sum(axis=axis), (a,), fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = const(a), const(b)
    return _node(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T if a.requires_grad else None,
                            a.value.T @ g if b.requires_grad else None))


def dense(x: TensorLike, w: Tensor, b: Tensor, activation: str | None = None) -> Tensor:
    """``act(x @ w + b)`` as one node; ``activation`` is ``None`` or ``"tanh"``."""
    x = const(x)
    y = x.value @ w.value
    y += b.value
    if activation == "tanh":
        np.tanh(y, out=y)
    elif activation is not None:
        raise ValueError(f"unsupported activation {activation!r}")

    def fn(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        if activation == "tanh":
            g = g * (1.0 - y * y)
        return (g @ w.value.T if x.requires_grad else None,
                x.value.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _node(y, (x, w, b), fn)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.value)
        full[start:stop] = g
        return (full,)

    return _node(a.value[start:stop], (a,), fn)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return (full,)

    return _node(a.value[:, start:stop], (a,), fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0, *sizes])

    def fn(g: np.ndarray) -> list[np.ndarray]:
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return _node(np.concatenate([p.value for p in parts], axis=0), parts, fn)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.value[index], (a,), fn)


# -- distributions -------------------------------------------------------------

def log_softmax(logits: Tensor) -> Tensor:
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _node(out, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[i, index[i]]`` for every row."""
    idx = np.asarray(index, dtype=np.int64)
    rows_ = np.arange(a.shape[0])

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.value)
        full[rows_, idx] = g
        return (full,)

    return _node(a.value[rows_, idx], (a,), fn)


def categorical_log_prob(logits: Tensor, actions: np.ndarray) -> Tensor:
    return pick(log_softmax(logits), actions)


def categorical_entropy(logits: Tensor) -> Tensor:
    logp = log_softmax(logits)
    return neg(sum(mul(exp(logp), logp), axis=1))


def gaussian_log_prob(mu: Tensor, log_std: Tensor, actions: np.ndarray) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis (fused op)."""
    a = np.asarray(actions, dtype=np.float64).reshape(mu.shape)
    std = np.exp(log_std.value)
    diff = a - mu.value
    zsq = (diff / std) ** 2
    out = (-0.5 * zsq - log_std.value - 0.5 * _LOG_2PI).sum(axis=-1)

    def fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gcol = g[:, None]
        d_mu = gcol * diff / std**2
        d_ls = _unbroadcast(gcol * (zsq - 1.0), log_std.shape)
        return d_mu, d_ls

    return _node(out, (mu, log_std), fn)


def gaussian_entropy(log_std: Tensor, rows_: int) -> Tensor:
    """Per-row entropy of a diagonal Gaussian with state-independent ``log_std``."""
    h = float(log_std.value.sum() + 0.5 * log_std.value.size * (1.0 + _LOG_2PI))
    return _node(np.full(rows_, h), (log_std,), lambda g: (np.full(log_std.shape, g.sum()),))


# -- recurrent -----------------------------------------------------------------

def gru_packed(xproj: Tensor, w_hh: Tensor, b_hh: Tensor, h0: Tensor,
               batch_sizes: np.ndarray) -> Tensor:
    """Fused packed GRU recurrence over time-major rows (see ``kernels``)."""
    bs = np.ascontiguousarray(batch_sizes, dtype=np.int64)
    out, hprev, r, z, n, hn = kernels.gru_forward(
        np.ascontiguousarray(xproj.value), np.ascontiguousarray(w_hh.value), b_hh.value,
        np.ascontiguousarray(h0.value), bs)
    num_seqs = h0.shape[0]

    def fn(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return kernels.gru_backward(np.ascontiguousarray(g), np.ascontiguousarray(w_hh.value), bs,
                                    hprev, r, z, n, hn, num_seqs)

    return _node(out, (xproj, w_hh, b_hh, h0), fn)


def gru_packed_reference(xproj: Tensor, w_hh: Tensor, b_hh: Tensor, h0: Tensor,
                         batch_sizes: np.ndarray) -> Tensor:
    """The same recurrence composed from primitive ops; slow, used as an oracle."""
    hidden = w_hh.shape[0]
    outs: list[Tensor] = []
    h = h0
    pos = 0
    for t, bs in enumerate(batch_sizes):
        bs = int(bs)
        h = rows(h, 0, bs)
        x = rows(xproj, pos, pos + bs)
        gh = add(matmul(h, w_hh), b_hh)
        r = sigmoid(add(cols(x, 0, hidden), cols(gh, 0, hidden)))
        z = sigmoid(add(cols(x, hidden, 2 * hidden), cols(gh, hidden, 2 * hidden)))
        n = tanh(add(cols(x, 2 * hidden, 3 * hidden), mul(r, cols(gh, 2 * hidden, 3 * hidden))))
        h = add(mul(sub(1.0, z), n), mul(z, h))
        outs.append(h)
        pos += bs
    return concat_rows(outs)


# -- driver --------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any trainable tensor")
    if loss.value.size != 1:
        raise GradientError("backward() needs a scalar loss")
    if not np.isfinite(loss.value).all():
        raise GradientError(f"non-finite loss {loss.value}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            if not np.isfinite(node.grad).all():
                raise GradientError(f"non-finite gradient for {node!r}")
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None
