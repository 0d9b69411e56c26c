"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--hidden 32] [--envs 16] [--steps 1024] [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` time per call for each
backend and the speedup. Both backends are imported directly, so the
``VERLITE_PURE_PYTHON`` switch has no effect here.
"""

from __future__ import annotations

import argparse
import timeit
from typing import Callable

import numpy as np

from verlite import _kernels_py as py

try:
    from verlite import _kernels as cy
except ImportError:
    cy = None


def cases(gen: np.random.Generator, hidden: int, envs: int, steps: int) -> dict[str, Callable[[object], object]]:
    obs_dim, enc, head = 8, hidden, 4
    seq_len = 32
    lengths = np.full(steps // seq_len, seq_len, dtype=np.int64)
    offsets = np.arange(0, steps, seq_len, dtype=np.int64)
    rewards, values = gen.standard_normal(steps), gen.standard_normal(steps)
    dones = gen.random(steps) < 0.02
    boot = gen.standard_normal(len(lengths))
    batch_sizes = np.full(seq_len, len(lengths), dtype=np.int64)
    xproj = gen.standard_normal((steps, 3 * hidden))
    wh = 0.3 * gen.standard_normal((hidden, 3 * hidden))
    bh = np.zeros(3 * hidden)
    h0 = gen.standard_normal((len(lengths), hidden))
    dout = gen.standard_normal((steps, hidden))
    shapes = [(obs_dim, enc), (enc,), (enc, enc), (enc,), (enc, 3 * hidden), (3 * hidden,), (hidden, 3 * hidden),
              (3 * hidden,), (hidden, head), (head,), (hidden, 1), (1,)]
    params = [np.ascontiguousarray(0.3 * gen.standard_normal(s)) for s in shapes]
    obs = gen.standard_normal((envs, obs_dim))
    h = gen.standard_normal((envs, hidden))
    logits = gen.standard_normal((envs, head))
    u = gen.random(envs)
    subset = list(range(0, envs, 2))
    caches: dict[object, tuple] = {}

    def gru_bwd(m):
        if m not in caches:
            caches[m] = tuple(np.asarray(a) for a in m.gru_forward(xproj, wh, bh, h0, batch_sizes))
        out, *cache = caches[m]
        return m.gru_backward(dout, wh, batch_sizes, *cache, len(lengths))

    kernels: dict[object, object] = {}

    def step_kernel(m):
        if m not in kernels:
            k = m.StepKernel(envs, obs_dim, enc, hidden, head)
            k.load(*params)
            kernels[m] = k
        k = kernels[m]
        nb = k.run(subset, obs, h)
        k.sample(nb, u)

    return {
        f"gae ({steps} steps)": lambda m: m.gae(rewards, values, dones, offsets, lengths, boot, 0.99, 0.95),
        f"pack_index ({steps} steps)": lambda m: m.pack_index(offsets, lengths),
        f"gru_forward ({steps}x{hidden})": lambda m: m.gru_forward(xproj, wh, bh, h0, batch_sizes),
        f"gru_backward ({steps}x{hidden})": gru_bwd,
        f"policy_step ({envs} envs)": lambda m: m.policy_step(obs, h, *params),
        f"StepKernel run+sample ({len(subset)} envs)": step_kernel,
        f"categorical_sample ({envs} envs)": lambda m: m.categorical_sample(logits, u),
    }


def best_time(fn: Callable[[], object], repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--hidden", type=int, default=32)
    parser.add_argument("--envs", type=int, default=16)
    parser.add_argument("--steps", type=int, default=1024, help="rows per learner-side call (multiple of 32)")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if args.steps % 32:
        parser.error("--steps must be a multiple of 32")
    table = cases(np.random.default_rng(0), args.hidden, args.envs, args.steps)
    width = max(len(name) for name in table)
    print(f"{'kernel':<{width}}  {'python':>12}  {'cython':>12}  {'speedup':>8}")
    for name, fn in table.items():
        t_py = best_time(lambda: fn(py), args.repeat)
        if cy is None:
            print(f"{name:<{width}}  {t_py * 1e6:>10.1f}us  {'n/a':>12}  {'n/a':>8}")
            continue
        t_cy = best_time(lambda: fn(cy), args.repeat)
        print(f"{name:<{width}}  {t_py * 1e6:>10.1f}us  {t_cy * 1e6:>10.1f}us  {t_py / t_cy:>7.1f}x")
    if cy is None:
        print("compiled extension not built; reinstall with Cython available to compare")


if __name__ == "__main__":
    main()
