import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackformer import attention as A
from stackformer import numerics as nx
from stackformer import stack as S
from stackformer.numerics import Tensor


def params(rng, d):
    return A.AttentionParams(*(Tensor(rng.normal(size=(d, d)) / math.sqrt(d), requires_grad=True)
                               for _ in range(4)))


def test_compatibility_examples():
    assert A.compatibility(np.zeros(4), np.zeros(4)) == 0.0
    assert A.compatibility([1, 0, 0, 0], [2, 0, 0, 0]) == 1.0
    q, k = np.random.default_rng(0).normal(size=(2, 6))
    assert A.compatibility(q, k) == A.compatibility(k, q)


def test_masked_weights_examples():
    row = A.masked_attention_weights(Tensor(np.zeros((1, 3))), np.array([[True, True, False]])).data
    assert np.allclose(row, [[0.5, 0.5, 0.0]])
    g = A.future_mask(5)
    w = A.masked_attention_weights(Tensor(np.zeros((5, 5))), np.where(np.arange(5)[:, None] == 0, True, g)).data
    assert np.allclose(w[3], [1 / 3, 1 / 3, 1 / 3, 0, 0])
    e = np.random.default_rng(1).normal(size=(4, 4))
    assert np.allclose(A.masked_attention_weights(Tensor(e), A.full_mask(4)).data, nx.softmax(Tensor(e)).data)


def test_empty_mask_row_raises():
    with pytest.raises(A.MaskError):
        A.masked_attention_weights(Tensor(np.zeros((3, 3))), A.future_mask(3))
    assert A.anchored_future_mask(3)[0].tolist() == [True, False, False]


def test_single_position_attends_to_itself():
    rng = np.random.default_rng(2)
    p = params(rng, 4)
    h = rng.normal(size=(1, 4))
    out = A.multi_head_self_attention(Tensor(h), p, A.MultiHeadConfig(4, 2)).data
    assert np.allclose(out, h @ p.w_v.data @ p.w_o.data)


def test_two_position_hand_case():
    h = np.array([[1.0, 0.0], [0.0, 2.0]])
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[2.0, 0.0], [0.0, 1.0]])
    wv = np.array([[1.0, 1.0], [0.0, 1.0]])
    wo = np.eye(2)
    p = A.AttentionParams(*(Tensor(w) for w in (wq, wk, wv, wo)))
    out = A.multi_head_self_attention(Tensor(h), p, A.MultiHeadConfig(2, 1)).data
    # q0=(1,0) k0=(2,0) k1=(0,2); q1=(0,2): scores/sqrt2
    s0 = np.array([2.0, 0.0]) / math.sqrt(2)
    s1 = np.array([0.0, 4.0]) / math.sqrt(2)
    v = np.array([[1.0, 1.0], [0.0, 2.0]])
    w0 = np.exp(s0) / np.exp(s0).sum()
    w1 = np.exp(s1) / np.exp(s1).sum()
    assert np.allclose(out, np.stack([w0 @ v, w1 @ v]), atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    p = params(rng, 8)
    cfg = A.MultiHeadConfig(8, 4)
    h = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    out = A.multi_head_self_attention(Tensor(h), p, cfg).data
    out_perm = A.multi_head_self_attention(Tensor(h[perm]), p, cfg).data
    assert np.allclose(out[perm], out_perm, atol=1e-12)


def test_heads_partition_the_projection():
    rng = np.random.default_rng(4)
    p = params(rng, 6)
    h = rng.normal(size=(1, 5, 6))
    full = A.multi_head_self_attention(Tensor(h), p, A.MultiHeadConfig(6, 3)).data
    total = np.zeros_like(full)
    for m in range(3):
        cols = slice(2 * m, 2 * m + 2)
        q, k, v = h @ p.w_q.data[:, cols], h @ p.w_k.data[:, cols], h @ p.w_v.data[:, cols]
        e = q @ np.swapaxes(k, -1, -2) / math.sqrt(2)
        w = np.exp(e - e.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        total += (w @ v) @ p.w_o.data[cols]
    assert np.allclose(full, total, atol=1e-12)


def test_future_masked_attention_is_causal():
    rng = np.random.default_rng(5)
    p = params(rng, 4)
    cfg = A.MultiHeadConfig(4, 2)
    h = rng.normal(size=(1, 6, 4))
    h2 = h.copy()
    h2[0, 4:] = rng.normal(size=(2, 4))
    g = A.anchored_future_mask(6)
    a = A.multi_head_self_attention(Tensor(h), p, cfg, g).data
    b = A.multi_head_self_attention(Tensor(h2), p, cfg, g).data
    # row i reads keys/values < i and its own query, so rows 0..3 agree
    assert np.array_equal(a[0, :4], b[0, :4])
    assert not np.allclose(a[0, 5], b[0, 5])


def test_attention_gradient():
    rng = np.random.default_rng(6)
    p = params(rng, 4)
    h = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 4)))
    g = A.anchored_future_mask(3)
    fn = lambda: nx.sum(nx.mul(A.multi_head_self_attention(h, p, A.MultiHeadConfig(4, 2), g), w))  # noqa: E731
    assert nx.gradcheck(fn, [h, p.w_q, p.w_k, p.w_v, p.w_o]) < 1e-7


def test_head_split_merge_round_trip():
    x = Tensor(np.arange(2 * 3 * 8, dtype=float).reshape(2, 3, 8))
    assert np.array_equal(A.merge_heads(A.split_heads(x, 4)).data, x.data)


def test_bad_head_count():
    with pytest.raises(ValueError):
        A.MultiHeadConfig(6, 4)


def _time_recursion(n: int) -> float:
    actions = S.random_actions(np.random.default_rng(0), n)[None]
    best = float("inf")
    for _ in range(3):
        t = time.perf_counter()
        S.alpha_recursion(actions)
        best = min(best, time.perf_counter() - t)
    return best


def test_stack_recursion_scaling_is_not_cubic():
    t64, t128, t256 = (_time_recursion(n) for n in (64, 128, 256))
    # each doubling of N costs ~4x for O(N^2) work and ~8x for O(N^3)
    assert t256 / t128 < 6.0
    assert t128 / t64 < 6.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_weights_rows_sum_to_one(n, seed):
    e = np.random.default_rng(seed).normal(size=(2, n, n)) * 5
    g = A.anchored_future_mask(n)
    w = A.masked_attention_weights(Tensor(e), np.broadcast_to(g, e.shape)).data
    assert np.allclose(w.sum(-1), 1.0)
    assert np.all(w[:, ~g] == 0)
