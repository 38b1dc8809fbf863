import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundwork import autodiff as ad
from groundwork.autodiff import Tensor


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3, 1], [2, 4]]))
    np.testing.assert_array_equal(out.data, [[3, 1], [2, 4]])


def test_matmul_hand_expansion():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_adjoint_against_ones_upstream():
    a, b = leaf([[1, 2], [3, 4]]), leaf([[5, 6], [7, 8]])
    ad.matmul(a, b).backward(np.ones((2, 2)))
    np.testing.assert_array_equal(a.grad, [[11, 15], [11, 15]])
    np.testing.assert_array_equal(b.grad, [[4, 4], [6, 6]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


@pytest.mark.parametrize(
    "logits, target, expected",
    [
        ([0.3, 0.3, 0.3, 0.3], 2, math.log(4)),
        ([1.0, 0.0], 0, math.log(1 + math.exp(-1))),
        ([0.0, 0.0], 1, math.log(2)),
    ],
)
def test_softmax_cross_entropy_values(logits, target, expected):
    assert ad.softmax_cross_entropy(Tensor(logits), target).item() == pytest.approx(expected, abs=1e-12)


def test_softmax_cross_entropy_gradient_is_softmax_minus_onehot():
    x = leaf([0.5, -1.0, 2.0])
    ad.softmax_cross_entropy(x, 1).backward()
    p = np.exp(x.data) / np.exp(x.data).sum()
    np.testing.assert_allclose(x.grad, p - np.eye(3)[1], atol=1e-14)


def test_softmax_cross_entropy_rejects_non_finite():
    with pytest.raises(ad.NumericError):
        ad.softmax_cross_entropy(Tensor([0.0, np.inf]), 0)


def test_gradcheck_linear_function_is_exact():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
    assert ad.gradcheck(lambda: ad.sum(x), [x]) < 1e-9


def test_gradcheck_square_at_three():
    x = leaf([3.0])
    ad.sum(ad.mul(x, x)).backward()
    assert x.grad[0] == 6.0
    assert ad.gradcheck(lambda: ad.sum(ad.mul(x, x)), [x], eps=1e-4) < 1e-7


def test_gradcheck_detects_nondeterminism():
    x = leaf([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(ad.DeterminismError):
        ad.gradcheck(lambda: ad.sum(ad.mul(x, float(rng.normal()))), [x])


def test_gradcheck_eps_bounds():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        ad.gradcheck(lambda: ad.sum(x), [x], eps=0.1)


rng = np.random.default_rng(1234)


def _r(*shape):
    return leaf(rng.normal(size=shape))


PRIMITIVES = {
    "matmul": lambda: (lambda a, b: (lambda: ad.sum(ad.mul(ad.matmul(a, b), W34)), [a, b]))(_r(3, 5), _r(5, 4)),
    "add_bias": lambda: (lambda a, b: (lambda: ad.sum(ad.mul(ad.add(a, b), W34)), [a, b]))(_r(3, 4), _r(4)),
    "mul": lambda: (lambda a, b: (lambda: ad.sum(ad.mul(a, b)), [a, b]))(_r(3, 4), _r(3, 4)),
    "div": lambda: (lambda a, b: (lambda: ad.sum(ad.div(a, b)), [a, b]))(_r(3, 4), leaf(rng.uniform(1, 2, (3, 4)))),
    "sigmoid": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.sigmoid(a), W34)), [a]))(_r(3, 4)),
    "log_sigmoid": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.log_sigmoid(a), W34)), [a]))(_r(3, 4)),
    "softplus": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.softplus(a), W34)), [a]))(_r(3, 4)),
    "gelu": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.gelu(a), W34)), [a]))(_r(3, 4)),
    "softmax": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.softmax(a, axis=1), W34)), [a]))(_r(3, 4)),
    "log_softmax_axis0": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.log_softmax(a, axis=0), W34)), [a]))(_r(3, 4)),
    "layer_norm": lambda: (lambda a, g, b: (lambda: ad.sum(ad.mul(ad.layer_norm(a, g, b), W34)), [a, g, b]))(
        _r(3, 4), _r(4), _r(4)),
    "embedding": lambda: (lambda t: (lambda: ad.sum(ad.mul(ad.embedding(t, [2, 0, 2]), W34)), [t]))(_r(5, 4)),
    "attention": lambda: (lambda q, k, v: (lambda: ad.sum(ad.mul(ad.attention(q, k, v, 2), W34)), [q, k, v]))(
        _r(3, 4), _r(6, 4), _r(6, 4)),
    "mean": lambda: (lambda a: (lambda: ad.mean(ad.mul(a, a)), [a]))(_r(3, 4)),
    "sum_axis": lambda: (lambda a: (lambda: ad.sum(ad.mul(ad.sum(a, axis=0), W34[0])), [a]))(_r(3, 4)),
    "concat_transpose": lambda: (lambda a, b: (lambda: ad.sum(ad.mul(ad.transpose(ad.concat([a, b], 1)), W34.T[:4, :3])), [a, b]))(
        _r(3, 2), _r(3, 2)),
    "index": lambda: (lambda a: (lambda: ad.sum(ad.mul(a[:, 1:3], W34[:, :2])), [a]))(_r(3, 4)),
    "maximum_minimum": lambda: (lambda a, b: (lambda: ad.sum(ad.add(ad.maximum(a, b), ad.minimum(a, 0.3))), [a, b]))(
        _r(3, 4), _r(3, 4)),
}
W34 = np.random.default_rng(99).normal(size=(3, 4))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    f, params = PRIMITIVES[name]()
    assert ad.gradcheck(f, params, eps=1e-4) <= 1e-4


def test_shared_subexpression_accumulates_like_duplicated_inputs():
    x = leaf([0.3, -0.7, 1.1])
    y = ad.sigmoid(x)
    ad.sum(ad.mul(y, y)).backward()
    shared = x.grad.copy()
    # oracle: two independent copies of the input, gradients summed
    x1, x2 = leaf(x.data), leaf(x.data)
    ad.sum(ad.mul(ad.sigmoid(x1), ad.sigmoid(x2))).backward()
    np.testing.assert_allclose(shared, x1.grad + x2.grad, rtol=0, atol=1e-15)


def test_backward_reaches_every_leaf():
    a, b, c = _r(2, 3), _r(3), _r(3, 2)
    out = ad.sum(ad.matmul(ad.add(a, b), c))
    out.backward()
    for t in (a, b, c):
        assert t.grad is not None and t.grad.shape == t.shape


def test_topological_order_visits_each_node_once():
    a = _r(2, 2)
    h = ad.sigmoid(a)
    out = ad.sum(ad.add(ad.mul(h, h), h))
    order = ad.topological_order(out)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    a = _r(2, 2)
    with ad.no_grad():
        out = ad.sum(ad.sigmoid(a))
    assert not out.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 100))
def test_forward_is_bit_identical_across_calls(values, seed):
    x = Tensor(values)
    w = Tensor(np.random.default_rng(seed).normal(size=len(values)))
    f = lambda: ad.log_softmax(ad.mul(ad.gelu(x), w)).data.tobytes()  # noqa: E731
    assert f() == f()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    p = ad.softmax(Tensor([values])).data
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= 0)


def test_broadcast_beyond_leading_axis_is_rejected():
    with pytest.raises(ad.DimensionError):
        ad.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))
