from __future__ import annotations

import json
import math

import numpy as np
import pytest

from verlite.nncore.checkpoint import load_checkpoint, save_checkpoint
from verlite.nncore.optim import Adam, cosine_lr


def test_first_adam_step_moves_by_lr_against_gradient_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(p, lr=1e-2)
    g = np.array([3.0, -0.1, 2e-3])
    out = opt.step(p, {"w": g})
    # bias-corrected m/sqrt(v) is g/|g| on the first step, softened by eps
    np.testing.assert_allclose(out["w"] - p["w"], -1e-2 * g / (np.abs(g) + 1e-5), rtol=1e-9)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 0.5])


def test_zero_gradient_leaves_params_and_missing_grads_pass_through():
    p = {"w": np.ones(2), "b": np.zeros(1)}
    opt = Adam(p, lr=1.0)
    out = opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(out["w"], p["w"])
    assert out["b"] is p["b"]


def test_cosine_schedule_endpoints():
    assert cosine_lr(2.5e-4, 0, 100) == 2.5e-4
    assert math.isclose(cosine_lr(2.5e-4, 50, 100), 1.25e-4)
    assert cosine_lr(2.5e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(1.0, 7, None) == 1.0
    opt = Adam({"w": np.zeros(1)}, lr=1.0, total_steps=2)
    opt.step({"w": np.zeros(1)}, {"w": np.ones(1)})
    opt.step({"w": np.zeros(1)}, {"w": np.ones(1)})
    assert opt.lr == pytest.approx(0.0, abs=1e-16)
    with pytest.raises(RuntimeError):
        opt.step({"w": np.zeros(1)}, {"w": np.ones(1)})


def test_adam_rejects_bad_settings():
    with pytest.raises(ValueError):
        Adam({}, lr=-1.0)
    with pytest.raises(ValueError):
        Adam({}, total_steps=0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, small_policy, rng):
    cfg, params = small_policy
    params = {k: v * np.pi / 3.0 for k, v in params.items()}
    opt = Adam(params, lr=1e-3, total_steps=10)
    for _ in range(3):
        params = opt.step(params, {k: rng.standard_normal(v.shape) for k, v in params.items()})
    path = save_checkpoint(tmp_path / "c.json", cfg, params, opt, {"update": 3, "alpha": 0.1 + 0.2})
    ck = load_checkpoint(path)
    assert ck.policy == cfg
    assert ck.extra == {"update": 3, "alpha": 0.1 + 0.2}
    for k in params:
        assert ck.params[k].tobytes() == params[k].tobytes()
    restored = ck.restore_optimizer()
    assert restored.step_count == 3 and restored.total_steps == 10
    g = {k: np.ones_like(v) for k, v in params.items()}
    a, b = opt.step(params, g), restored.step(ck.params, g)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_optimizer_and_format_errors(tmp_path, gaussian_policy):
    cfg, params = gaussian_policy
    path = save_checkpoint(tmp_path / "p.json", cfg, params)
    ck = load_checkpoint(path)
    with pytest.raises(ValueError):
        ck.restore_optimizer()
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.json")
