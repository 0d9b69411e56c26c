"""Adam with a cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Any

import numpy as np


def cosine_lr(base: float, step: int, total: int | None) -> float:
    """``base`` decayed along a half cosine to 0 at ``total`` steps."""
    if total is None:
        return base
    frac = min(step, total) / total
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam over a dict of named arrays.

    ``step`` returns a new params dict; inputs are never mutated, so callers
    can treat each returned dict as an immutable snapshot.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 2.5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-5,
                 total_steps: int | None = None) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if total_steps is not None and total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.step_count, self.total_steps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.total_steps is not None and self.step_count >= self.total_steps:
            raise RuntimeError(f"optimizer schedule exhausted after {self.total_steps} steps")
        lr = self.lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        out: dict[str, np.ndarray] = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_dict(self) -> dict[str, Any]:
        return {
            "base_lr": self.base_lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "total_steps": self.total_steps,
            "step_count": self.step_count,
            "m": self.m,
            "v": self.v,
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.base_lr = float(state["base_lr"])
        self.betas = (float(state["betas"][0]), float(state["betas"][1]))
        self.eps = float(state["eps"])
        self.total_steps = state["total_steps"]
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
