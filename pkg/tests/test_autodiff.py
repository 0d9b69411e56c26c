from __future__ import annotations

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from verlite.nncore import autodiff as ad

TOL = 1e-4


def check_op(build, shapes, seed=0, positive=False, tol=TOL):
    """Differentiate ``sum(w * build(*inputs))`` and compare every input gradient with finite differences."""
    gen = np.random.default_rng(seed)
    values = [gen.uniform(0.5, 2.0, s) if positive else gen.standard_normal(s) for s in shapes]
    out_shape = build(*[ad.Tensor(v) for v in values]).shape
    w = gen.standard_normal(out_shape)

    def scalar() -> float:
        return float(np.sum(w * build(*[ad.Tensor(v) for v in values]).value))

    params = [ad.param(v) for v in values]
    loss = ad.sum(ad.mul(build(*params), w))
    ad.backward(loss)
    worst = 0.0
    for p, v in zip(params, values):
        num = numeric_grad(scalar, v)
        got = p.grad if p.grad is not None else np.zeros_like(v)
        worst = max(worst, rel_error(got, num))
    assert worst <= tol, worst
    return worst


OPS = [
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (4,)], False),
    ("add_scalar_broadcast", lambda a, b: ad.add(a, b), [(3, 4), (1, 4)], False),
    ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (3, 1)], False),
    ("mul", lambda a, b: ad.mul(a, b), [(2, 5), (2, 5)], False),
    ("neg", lambda a: ad.neg(a), [(4,)], False),
    ("tanh", lambda a: ad.tanh(a), [(3, 3)], False),
    ("sigmoid", lambda a: ad.sigmoid(a), [(3, 3)], False),
    ("exp", lambda a: ad.exp(a), [(5,)], False),
    ("log", lambda a: ad.log(a), [(5,)], True),
    ("square", lambda a: ad.square(a), [(2, 3)], False),
    ("sum_all", lambda a: ad.sum(a), [(2, 3)], False),
    ("sum_axis", lambda a: ad.sum(a, axis=1), [(2, 3)], False),
    ("mean", lambda a: ad.mean(a, axis=0), [(4, 3)], False),
    ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    ("dense", lambda x, w, b: ad.dense(x, w, b), [(5, 3), (3, 4), (4,)], False),
    ("dense_tanh", lambda x, w, b: ad.dense(x, w, b, "tanh"), [(5, 3), (3, 4), (4,)], False),
    ("rows", lambda a: ad.rows(a, 1, 3), [(4, 2)], False),
    ("cols", lambda a: ad.cols(a, 1, 3), [(2, 4)], False),
    ("concat_rows", lambda a, b: ad.concat_rows([a, b]), [(2, 3), (1, 3)], False),
    ("take_rows", lambda a: ad.take_rows(a, np.array([0, 2, 2, 1])), [(3, 2)], False),
    ("log_softmax", lambda a: ad.log_softmax(a), [(4, 3)], False),
    ("pick", lambda a: ad.pick(a, np.array([2, 0, 1])), [(3, 3)], False),
    ("categorical_log_prob", lambda a: ad.categorical_log_prob(a, np.array([1, 0, 2, 2])), [(4, 3)], False),
    ("categorical_entropy", lambda a: ad.categorical_entropy(a), [(4, 3)], False),
    ("gaussian_log_prob", lambda m, s: ad.gaussian_log_prob(m, s, np.ones((3, 2))), [(3, 2), (2,)], False),
    ("gaussian_entropy", lambda s: ad.gaussian_entropy(s, 3), [(2,)], False),
]


@pytest.mark.parametrize("name,build,shapes,positive", OPS)
def test_op_gradients(name, build, shapes, positive):
    check_op(build, shapes, positive=positive)


def test_minimum_and_clip_away_from_kinks():
    a = np.array([0.1, 0.9, -0.4, 1.5])
    b = np.array([0.5, 0.2, -1.0, 3.0])
    pa, pb = ad.param(a), ad.param(b)
    ad.backward(ad.sum(ad.mul(ad.minimum(pa, pb), np.array([1.0, 2.0, 3.0, 4.0]))))
    np.testing.assert_array_equal(pa.grad, [1.0, 0.0, 0.0, 4.0])
    np.testing.assert_array_equal(pb.grad, [0.0, 2.0, 3.0, 0.0])
    pc = ad.param(np.array([-2.0, 0.5, 3.0]))
    ad.backward(ad.sum(ad.clip(pc, -1.0, 1.0)))
    np.testing.assert_array_equal(pc.grad, [0.0, 1.0, 0.0])


def test_minimum_tie_routes_to_first_argument():
    pa, pb = ad.param(np.array([1.0])), ad.param(np.array([1.0]))
    ad.backward(ad.sum(ad.minimum(pa, pb)))
    assert pa.grad[0] == 1.0
    assert pb.grad is None or pb.grad[0] == 0.0


def _packed_inputs(seed=0, hidden=4):
    gen = np.random.default_rng(seed)
    batch_sizes = np.array([3, 3, 2, 1, 1])
    steps = int(batch_sizes.sum())
    return (gen.standard_normal((steps, 3 * hidden)), 0.5 * gen.standard_normal((hidden, 3 * hidden)),
            0.1 * gen.standard_normal(3 * hidden), gen.standard_normal((3, hidden)), batch_sizes)


def test_fused_gru_matches_reference_forward_and_backward():
    x, wh, bh, h0, bs = _packed_inputs()
    w = np.random.default_rng(1).standard_normal((int(bs.sum()), 4))
    results = []
    for fn in (ad.gru_packed, ad.gru_packed_reference):
        ps = [ad.param(v) for v in (x, wh, bh, h0)]
        out = fn(*ps, bs)
        ad.backward(ad.sum(ad.mul(out, w)))
        results.append((out.value, [p.grad for p in ps]))
    np.testing.assert_allclose(results[0][0], results[1][0], rtol=0, atol=1e-12)
    for g1, g2 in zip(results[0][1], results[1][1]):
        np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-11)


def test_fused_gru_finite_differences():
    x, wh, bh, h0, bs = _packed_inputs(2)
    check_op(lambda a, b, c, d: ad.gru_packed(a, b, c, d, bs), [x.shape, wh.shape, bh.shape, h0.shape], seed=3)


def test_shared_subexpression_accumulates():
    p = ad.param(np.array([2.0, -1.0]))
    y = ad.mul(p, p)
    ad.backward(ad.sum(ad.add(y, y)))
    np.testing.assert_allclose(p.grad, 4.0 * p.value)


def test_backward_requires_scalar_connected_finite_loss():
    p = ad.param(np.ones(2))
    with pytest.raises(ad.GradientError):
        ad.backward(ad.mul(p, 2.0))
    with pytest.raises(ad.GradientError):
        ad.backward(ad.sum(ad.Tensor(np.ones(2))))
    with pytest.raises(ad.GradientError):
        ad.backward(ad.sum(ad.mul(p, np.inf)))


def test_stop_gradient_detaches():
    p = ad.param(np.array([3.0]))
    loss = ad.add(ad.sum(ad.stop_gradient(ad.mul(p, p))), ad.sum(p))
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [1.0])


def test_zero_grad_and_operators():
    a, b = ad.param(np.array([1.0, 2.0])), ad.param(np.array([3.0, 4.0]))
    loss = ad.sum((a * b - a) + (-b) + 2.0 * a)
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, b.value + 1.0)
    ad.zero_grad([a, b])
    assert a.grad is None and b.grad is None


def test_dense_rejects_unknown_activation():
    with pytest.raises(ValueError):
        ad.dense(np.ones((1, 2)), ad.param(np.ones((2, 2))), ad.param(np.zeros(2)), "relu")
