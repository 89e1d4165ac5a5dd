"""Positional encodings: none, sincos, relative, rotary, alibi.

``sincos`` is added to the embeddings; the others act inside attention via
the hooks accepted by :func:`stackformer.attention.multi_head_self_attention`.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor

KINDS = ("none", "sincos", "relative", "rotary", "alibi")


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown positional encoding {kind!r}; expected one of {KINDS}")
    return kind


def sinusoid_table(positions: np.ndarray, d: int) -> np.ndarray:
    """Rows ``[sin(p w_0), cos(p w_0), sin(p w_1), ...]`` with ``w_k = 10000^(-2k/d)``."""
    positions = np.asarray(positions, dtype=np.float64)
    k = np.arange(0, d, 2)
    freq = 1.0 / (10000.0 ** (k / d))
    ang = positions[:, None] * freq[None, :]
    table = np.zeros((positions.shape[0], d))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang[:, : d // 2])
    return table


def alibi_slopes(n_heads: int) -> np.ndarray:
    return 2.0 ** (-8.0 * np.arange(1, n_heads + 1) / n_heads)


def alibi_bias(n_heads: int, n: int) -> np.ndarray:
    """``(M, N, N)`` bias ``-slope_m * |i - j|``; zero on the diagonal, penalising distance."""
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    return -alibi_slopes(n_heads)[:, None, None] * dist[None]


def rotary_angles(n: int, d_head: int) -> np.ndarray:
    """``(N, D'/2)`` rotation angles ``p * 10000^(-2k/D')``."""
    k = np.arange(0, d_head, 2)
    freq = 1.0 / (10000.0 ** (k / d_head))
    return np.arange(n)[:, None] * freq[None, :]


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    even, odd = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotary(x: Tensor) -> Tensor:
    """Rotate consecutive pairs of the last axis of ``(..., N, D')`` by position angles."""
    n, dh = x.shape[-2], x.shape[-1]
    if dh % 2:
        raise nx.ShapeError(f"rotary needs an even head width, got {dh}")
    ang = rotary_angles(n, dh).astype(x.dtype)
    cos, sin = np.cos(ang), np.sin(ang)
    # orthogonal map, so the gradient is the inverse rotation
    return nx.custom_op(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def relative_terms(q: Tensor, k: Tensor, u: Tensor, v: Tensor, w_r: Tensor) -> Tensor:
    """Transformer-XL score terms beyond ``q_i . k_j``, before the ``1/sqrt(D')`` scaling.

    ``u . k_j + (q_i + v) . (W_R r_{i-j})`` with sinusoidal ``r``, per head.
    ``q``/``k`` are ``(B, M, N, D')``; ``u``/``v`` are ``(M, D')``; ``w_r`` is ``(D, D)``.
    """
    b, m, n, dh = q.shape
    rel = np.arange(-(n - 1), n)  # offset i - j, index i - j + n - 1
    r = Tensor(sinusoid_table(rel, m * dh).astype(q.dtype))
    rk = nx.transpose(nx.reshape(nx.matmul(r, w_r), (2 * n - 1, m, dh)), (1, 0, 2))  # (M, 2N-1, D')
    rk = nx.broadcast_to(nx.reshape(rk, (1, m, 2 * n - 1, dh)), (b, m, 2 * n - 1, dh))
    uk = nx.matmul(nx.broadcast_to(nx.reshape(u, (1, m, 1, dh)), (b, m, 1, dh)), nx.transpose(k))
    content = nx.broadcast_to(uk, (b, m, n, n))
    qv = nx.add(q, nx.broadcast_to(nx.reshape(v, (1, m, 1, dh)), q.shape))
    pos_all = nx.matmul(qv, nx.transpose(rk))  # (B, M, N, 2N-1)
    idx = np.arange(n)[:, None] - np.arange(n)[None, :] + n - 1
    return nx.add(content, nx.gather_last(pos_all, idx))
