import numpy as np
import pytest

from stackformer import numerics as nx
from stackformer import positional as pe
from stackformer.numerics import Tensor


def test_sinusoid_table_values():
    t = pe.sinusoid_table(np.arange(4), 6)
    assert np.allclose(t[0], [0, 1, 0, 1, 0, 1])
    p, k, d = 3, 1, 6
    assert t[p, 2 * k] == pytest.approx(np.sin(p / 10000 ** (2 * k / d)))
    assert t[p, 2 * k + 1] == pytest.approx(np.cos(p / 10000 ** (2 * k / d)))


def test_alibi_slopes_and_bias():
    assert np.allclose(pe.alibi_slopes(8), [2.0 ** -k for k in range(1, 9)])
    bias = pe.alibi_bias(4, 5)
    assert bias.shape == (4, 5, 5)
    assert np.all(np.diagonal(bias, axis1=1, axis2=2) == 0)
    assert bias[0, 4, 1] == pytest.approx(-3 * pe.alibi_slopes(4)[0])
    assert np.all(bias <= 0)


def test_rotary_is_isometry_and_relative():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(1, 1, 6, 4))
    rq = pe.rotary(Tensor(q)).data
    assert np.allclose(np.linalg.norm(rq, axis=-1), np.linalg.norm(q, axis=-1), atol=1e-6)
    # the same vector pair at a fixed offset scores identically wherever it sits
    a, b = rng.normal(size=4), rng.normal(size=4)
    x = np.zeros((1, 1, 6, 4))
    y = np.zeros((1, 1, 6, 4))
    x[0, 0, :] = a
    y[0, 0, :] = b
    rx, ry = pe.rotary(Tensor(x)).data[0, 0], pe.rotary(Tensor(y)).data[0, 0]
    assert rx[3] @ ry[1] == pytest.approx(rx[5] @ ry[3])
    assert rx[0] @ ry[0] == pytest.approx(a @ b)


def test_rotary_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 2, 5, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 5, 4)))
    assert nx.gradcheck(lambda: nx.sum(nx.mul(pe.rotary(x), w)), [x]) < 1e-7


def test_relative_terms_match_direct_formula():
    rng = np.random.default_rng(2)
    b, m, n, dh = 1, 2, 4, 3
    d = m * dh
    q, k = rng.normal(size=(b, m, n, dh)), rng.normal(size=(b, m, n, dh))
    u, v = rng.normal(size=(m, dh)), rng.normal(size=(m, dh))
    w_r = rng.normal(size=(d, d))
    out = pe.relative_terms(*(Tensor(a) for a in (q, k, u, v, w_r))).data
    for h in range(m):
        for i in range(n):
            for j in range(n):
                r = pe.sinusoid_table(np.array([i - j]), d)[0] @ w_r
                r_h = r[h * dh:(h + 1) * dh]
                expect = u[h] @ k[0, h, j] + (q[0, h, i] + v[h]) @ r_h
                assert out[0, h, i, j] == pytest.approx(expect)


def test_relative_terms_gradient():
    rng = np.random.default_rng(3)
    ts = [Tensor(rng.normal(size=s), requires_grad=True)
          for s in [(1, 2, 3, 2), (1, 2, 3, 2), (2, 2), (2, 2), (4, 4)]]
    w = Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert nx.gradcheck(lambda: nx.sum(nx.mul(pe.relative_terms(*ts), w)), ts) < 1e-7


def test_unknown_kind():
    with pytest.raises(ValueError):
        pe.check_kind("learned")
