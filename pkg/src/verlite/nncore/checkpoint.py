"""JSON checkpoints.

Layout (``format_version`` 1)::

    {
      "format": "verlite-checkpoint",
      "format_version": 1,
      "policy": {PolicyConfig fields},
      "params": {name: {"shape": [...], "data": [flat floats]}},
      "optimizer": {"base_lr", "betas", "eps", "total_steps", "step_count",
                    "m": {name: array}, "v": {name: array}},
      "extra": {free-form JSON, e.g. update counter and entropy coefficient}
    }

Floats are written with ``repr`` precision so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from verlite.nncore.optim import Adam
from verlite.nncore.policy import Params, PolicyConfig, check_params

FORMAT = "verlite-checkpoint"
FORMAT_VERSION = 1


def _encode(a: np.ndarray) -> dict[str, Any]:
    return {"shape": list(a.shape), "data": [float(x) for x in np.ravel(a)]}


def _decode(d: dict[str, Any]) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


@dataclass
class Checkpoint:
    policy: PolicyConfig
    params: Params
    optimizer: dict[str, Any] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def restore_optimizer(self) -> Adam:
        if self.optimizer is None:
            raise ValueError("checkpoint has no optimizer state")
        opt = Adam(self.params)
        opt.load_state_dict(self.optimizer)
        return opt


def save_checkpoint(path: str | os.PathLike[str], policy: PolicyConfig, params: Params,
                    optimizer: Adam | None = None, extra: dict[str, Any] | None = None) -> Path:
    doc: dict[str, Any] = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "policy": policy.to_dict(),
        "params": {k: _encode(v) for k, v in params.items()},
        "optimizer": None,
        "extra": extra or {},
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        state["m"] = {k: _encode(v) for k, v in state["m"].items()}
        state["v"] = {k: _encode(v) for k, v in state["v"].items()}
        doc["optimizer"] = state
    out = Path(path)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(out)
    return out


def load_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    policy = PolicyConfig(**doc["policy"])
    params = {k: _decode(v) for k, v in doc["params"].items()}
    check_params(policy, params)
    opt = doc.get("optimizer")
    if opt is not None:
        opt = dict(opt)
        opt["m"] = {k: _decode(v) for k, v in opt["m"].items()}
        opt["v"] = {k: _decode(v) for k, v in opt["v"].items()}
    return Checkpoint(policy, params, opt, doc.get("extra", {}))
