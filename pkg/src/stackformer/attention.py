"""Scaled dot-product multi-head self-attention with boolean masks.

States are laid out sequence-major: ``H`` has shape ``(B, N, D)`` (or
``(N, D)``), so row ``i`` is the representation of position ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class MaskError(ValueError):
    """A softmax row would have no admissible entry."""


@dataclass(frozen=True)
class MultiHeadConfig:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def compatibility(q: np.ndarray, k: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ShapeError(f"compatibility: widths {q.shape} and {k.shape} differ")
    return float(q @ k) / math.sqrt(q.shape[0])


def future_mask(n: int) -> np.ndarray:
    """``G[i, m] = m < i``.  Row 0 is empty."""
    return np.tril(np.ones((n, n), dtype=bool), k=-1)


def anchored_future_mask(n: int) -> np.ndarray:
    """Strict future mask with the ``[BOS]`` row allowed to attend to itself."""
    g = future_mask(n)
    g[0, 0] = True
    return g


def full_mask(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=bool)


def masked_attention_weights(e: Tensor, g: np.ndarray | None) -> Tensor:
    """Softmax of compatibilities restricted to ``g``; all-masked rows raise :class:`MaskError`."""
    if g is None:
        return nx.softmax(e, axis=-1)
    g = np.asarray(g, dtype=bool)
    if g.shape[-2:] != e.shape[-2:]:
        raise ShapeError(f"mask {g.shape} does not match scores {e.shape}")
    empty = ~g.any(axis=-1)
    if empty.any():
        rows = np.argwhere(empty)[:, -1].tolist()
        raise MaskError(f"attention rows {sorted(set(rows))} have no admissible position")
    return nx.masked_softmax(e, g)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, m, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, m * dh))


@dataclass
class AttentionParams:
    """Projection weights stored input-major: ``q = h @ w_q``.

    Head ``m`` owns columns ``m*D'..(m+1)*D'`` of ``w_q``/``w_k``/``w_v`` and
    the matching rows of ``w_o``; ``merge(A) @ w_o`` equals the per-head sum.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


# hooks let positional encodings act on per-head q/k or on the score matrix
QKHook = Callable[[Tensor, Tensor], tuple[Tensor, Tensor]]
ScoreHook = Callable[[Tensor, Tensor, Tensor], Tensor]


def multi_head_self_attention(h: Tensor, params: AttentionParams, cfg: MultiHeadConfig,
                              g: np.ndarray | None = None, qk_hook: QKHook | None = None,
                              score_hook: ScoreHook | None = None,
                              keep_weights: list | None = None) -> Tensor:
    single = h.ndim == 2
    if single:
        h = nx.reshape(h, (1,) + h.shape)
    if h.shape[-1] != cfg.d_model:
        raise ShapeError(f"attention: width {h.shape[-1]} vs d_model {cfg.d_model}")
    q = split_heads(nx.matmul(h, params.w_q), cfg.n_heads)
    k = split_heads(nx.matmul(h, params.w_k), cfg.n_heads)
    v = split_heads(nx.matmul(h, params.w_v), cfg.n_heads)
    if qk_hook is not None:
        q, k = qk_hook(q, k)
    e = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(cfg.d_head))
    if score_hook is not None:
        e = score_hook(e, q, k)
    alpha = masked_attention_weights(e, g)
    if keep_weights is not None:
        keep_weights.append(alpha.data)
    out = nx.matmul(merge_heads(nx.matmul(alpha, v)), params.w_o)
    if single:
        out = nx.reshape(out, out.shape[1:])
    return out
