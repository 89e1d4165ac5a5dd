import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackformer import numerics as nx
from stackformer.numerics import ShapeError, Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(nx.matmul(eye, m).data, m.data)
    out = nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    fn = lambda: nx.sum(nx.matmul(a, b))  # noqa: E731
    nx.backward(fn())
    num = nx.numerical_grad(fn, a)
    assert nx.relative_error(a.grad, num) < 1e-6


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        nx.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_implicit_broadcast_is_refused():
    # row vector + matrix must go through broadcast_to explicitly
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))
    out = nx.add(Tensor(np.ones((2, 3))), nx.broadcast_to(Tensor(np.ones((1, 3))), (2, 3)))
    assert out.shape == (2, 3)


@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
    ([1000.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
    ([math.log(1), math.log(2), math.log(3)], [1 / 6, 2 / 6, 3 / 6]),
])
def test_softmax_examples(x, expected):
    out = nx.softmax(Tensor(np.array(x))).data
    assert np.allclose(out, expected, atol=1e-12, rtol=0)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        nx.softmax(Tensor(np.array([0.0, np.nan])))


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(nx.layer_norm(Tensor(np.full(4, 3.0)), g, b).data, 0.0)
    out = nx.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-4)
    x = np.random.default_rng(3).normal(size=(5, 4)) * 7 + 2
    assert np.all(np.abs(nx.layer_norm(Tensor(x), g, b).data.mean(-1)) < 1e-10)


def test_backward_simple_losses():
    w = Tensor(np.arange(5.0), requires_grad=True)
    nx.backward(nx.sum(w))
    assert np.array_equal(w.grad, np.ones(5))
    w.grad = None
    nx.backward(nx.sum(nx.mul(w, w)))
    assert np.array_equal(w.grad, 2 * w.data)


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        nx.backward(nx.mul(w, w))


def test_gradients_accumulate_until_cleared():
    w = Tensor(np.ones(2), requires_grad=True)
    nx.backward(nx.sum(w))
    nx.backward(nx.sum(w))
    assert np.array_equal(w.grad, [2.0, 2.0])
    nx.zero_grad([w])
    assert w.grad is None


def test_tape_visits_shared_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nx.mul(x, x)
    z = nx.sum(nx.add(y, y))  # d/dx 2x^2 = 4x
    nx.backward(z)
    assert np.allclose(x.grad, [8.0])
    assert len(nx.ComputationTape(z)) == 4


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        out = nx.mul(w, w)
    assert not out.requires_grad


def test_masked_softmax_matches_additive_mask():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) < 0.6
    mask[:, 0] = True
    mult = nx.masked_softmax(Tensor(e), mask).data
    additive = np.where(mask, e, -np.inf)
    ref = np.exp(additive - additive.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    assert np.allclose(mult, ref, atol=1e-12)
    assert np.all(mult[~mask] == 0.0)


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(ValueError):
        nx.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


def test_cross_entropy_uniform_logits():
    loss = nx.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4))


OPS = {
    "add": lambda a, b: nx.add(a, b),
    "mul": lambda a, b: nx.mul(a, b),
    "sub": lambda a, b: nx.sub(a, b),
    "matmul_t": lambda a, b: nx.matmul(a, nx.transpose(b)),
    "relu": lambda a, b: nx.relu(nx.add(a, b)),
    "exp": lambda a, b: nx.exp(nx.scale(a, 0.3)),
    "softmax": lambda a, b: nx.mul(nx.softmax(a), b),
    "layer_norm": lambda a, b: nx.layer_norm(a, Tensor(np.linspace(0.5, 1.5, a.shape[-1]), requires_grad=True),
                                             Tensor(np.zeros(a.shape[-1]))),
    "concat": lambda a, b: nx.concat([a, b], axis=0),
    "getitem": lambda a, b: nx.mul(a[1:], b[:-1]),
    "reshape": lambda a, b: nx.reshape(nx.mul(a, b), (-1,)),
    "bias": lambda a, b: nx.add_bias(a, b[0]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(7)
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    w = Tensor(rng.normal(size=OPS[name](a, b).shape))
    fn = lambda: nx.sum(nx.mul(OPS[name](a, b), w))  # noqa: E731
    assert nx.gradcheck(fn, [a, b]) < 1e-7


def test_log_and_cross_entropy_gradients():
    rng = np.random.default_rng(2)
    a = Tensor(rng.random((2, 3)) + 0.5, requires_grad=True)
    assert nx.gradcheck(lambda: nx.sum(nx.log(a)), [a]) < 1e-7
    z = leaf(rng, 2, 5, 4)
    t = rng.integers(0, 4, size=(2, 5))
    assert nx.gradcheck(lambda: nx.cross_entropy(z, t), [z]) < 1e-7


def test_embedding_and_gather_gradients():
    rng = np.random.default_rng(4)
    table = leaf(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    w = Tensor(rng.normal(size=(2, 3, 3)))
    assert nx.gradcheck(lambda: nx.sum(nx.mul(nx.embedding(table, ids), w)), [table]) < 1e-7
    x = leaf(rng, 2, 3, 3, 5)
    idx = np.array([[2, 1, 0], [3, 2, 1], [4, 3, 2]])
    w2 = Tensor(rng.normal(size=(2, 3, 3, 3)))
    assert nx.gradcheck(lambda: nx.sum(nx.mul(nx.gather_last(x, idx), w2)), [x]) < 1e-7


def test_masked_softmax_gradient():
    rng = np.random.default_rng(5)
    e = leaf(rng, 3, 4)
    mask = np.tril(np.ones((3, 4), dtype=bool))
    w = Tensor(rng.normal(size=(3, 4)))
    assert nx.gradcheck(lambda: nx.sum(nx.mul(nx.masked_softmax(e, mask), w)), [e]) < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = nx.softmax(Tensor(np.array(values))).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_gradient_random_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, m, k), leaf(rng, k, n)
    w = Tensor(rng.normal(size=(m, n)))
    assert nx.gradcheck(lambda: nx.sum(nx.mul(nx.matmul(a, b), w)), [a, b]) < 1e-6
