"""Post-norm transformer with an optional stack sublayer in every layer.

Per layer::

    H_M   = LN(MHSA(H) + H)
    H_FFN = LN(FFN(H_M) + H_M)
    H_out = S(H_FFN) + H_FFN      # stack enabled
    H_out = H_FFN                 # stack disabled

``[BOS]`` is prepended in both modes so the stack has its empty-stack anchor
at position 0.  MLM attention is bidirectional; ALM uses the strict future
mask in every attention sublayer.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from . import positional as pe
from .attention import (AttentionParams, MultiHeadConfig, anchored_future_mask,
                        multi_head_self_attention)
from .numerics import Tensor
from .stack import stack_sublayer

BOS, EOS, MASK, PAD = "[BOS]", "[EOS]", "[MASK]", "[PAD]"
SPECIALS = (BOS, EOS, MASK, PAD)
MODES = ("mlm", "alm")


class Vocabulary:
    """Bijection between symbols and ids; ``[BOS]`` is always id 0.

    ``symbols`` is the task alphabet ``Sigma``.  ``[PAD]`` may belong to it
    (stack manipulation outputs it) and then keeps its special id.
    """

    def __init__(self, symbols: Sequence[str], output_symbols: Sequence[str] | None = None):
        self.sigma = list(dict.fromkeys(symbols))
        self.itos = list(SPECIALS) + [s for s in self.sigma if s not in SPECIALS]
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.output_symbols = list(output_symbols) if output_symbols is not None else list(self.sigma)
        for s in self.output_symbols:
            if s not in self.sigma:
                raise ValueError(f"output symbol {s!r} is not in the alphabet")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocabulary) and self.itos == other.itos
                and self.sigma == other.sigma and self.output_symbols == other.output_symbols)

    def encode(self, seq: Iterable[str]) -> list[int]:
        out = []
        for s in seq:
            if s not in self.stoi:
                raise KeyError(f"unknown token {s!r}")
            out.append(self.stoi[s])
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def classes(self, mode: str) -> list[str]:
        """Output classes: ``Sigma + [MASK]`` for MLM, ``Sigma + [EOS]`` for ALM."""
        extra = MASK if mode == "mlm" else EOS
        return self.sigma + [extra]

    def class_ids(self, seq: Iterable[str], mode: str) -> list[int]:
        index = {s: i for i, s in enumerate(self.classes(mode))}
        return [index[s] for s in seq]


@dataclass
class ModelConfig:
    vocab: Vocabulary
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    ffn_dim: int = 0  # 0 means 4 * d_model
    pe: str = "none"
    stack: bool = True
    mode: str = "mlm"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        pe.check_kind(self.pe)
        if self.ffn_dim <= 0:
            self.ffn_dim = 4 * self.d_model
        if self.pe == "rotary" and (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary encodings need an even head width")

    @property
    def head(self) -> MultiHeadConfig:
        return MultiHeadConfig(self.d_model, self.n_heads)

    def as_dict(self) -> dict:
        return {"n_layers": self.n_layers, "d_model": self.d_model, "n_heads": self.n_heads,
                "ffn_dim": self.ffn_dim, "pe": self.pe, "stack": self.stack, "mode": self.mode}


PAPER_SCALE = {"n_layers": 5, "d_model": 64, "n_heads": 8}
DESK_SCALE = {"n_layers": 2, "d_model": 32, "n_heads": 4}


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> "OrderedDict[str, Tensor]":
    """Affine weights ~ U(+-1/sqrt(fan_in)), biases 0, embeddings ~ N(0, 0.02), LN gain 1."""
    d, f = cfg.d_model, cfg.ffn_dim
    n_out = len(cfg.vocab.classes(cfg.mode))
    params: OrderedDict[str, np.ndarray] = OrderedDict()

    def affine(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))

    params["embed"] = rng.normal(0.0, 0.02, size=(len(cfg.vocab), d))
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for w in ("w_q", "w_k", "w_v", "w_o"):
            affine(p + "attn." + w, d, d)
        if cfg.pe == "relative":
            dh = d // cfg.n_heads
            params[p + "attn.rel_u"] = rng.normal(0.0, 0.02, size=(cfg.n_heads, dh))
            params[p + "attn.rel_v"] = rng.normal(0.0, 0.02, size=(cfg.n_heads, dh))
            affine(p + "attn.rel_w", d, d)
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        affine(p + "ffn.w1", d, f)
        params[p + "ffn.b1"] = np.zeros(f)
        affine(p + "ffn.w2", f, d)
        params[p + "ffn.b2"] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        if cfg.stack:
            bound = 1.0 / np.sqrt(d)
            params[p + "stack.w_a"] = rng.uniform(-bound, bound, size=(3, d))
            params[p + "stack.b_a"] = np.zeros(3)
    affine("head.w", d, n_out)
    params["head.b"] = np.zeros(n_out)
    return OrderedDict((k, Tensor(v.astype(dtype), requires_grad=True, name=k)) for k, v in params.items())


@dataclass
class LayerTrace:
    attention: np.ndarray | None = None
    alphas: np.ndarray | None = None
    actions: np.ndarray | None = None


class StackTransformer:
    """The full model; parameters live in :attr:`params` keyed by dotted names."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: "OrderedDict[str, Tensor] | None" = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed), dtype)
        self.trace: list[LayerTrace] = []

    # -- helpers ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "StackTransformer":
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True, name=k))
                             for k, v in self.params.items())
        return StackTransformer(self.cfg, dtype=dtype, params=params)

    def with_config(self, **changes) -> "StackTransformer":
        """Same parameters, different structural flags (e.g. ``stack=False``)."""
        return StackTransformer(replace(self.cfg, **changes), dtype=self.dtype, params=self.params)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.ndim != 2 or ids.dtype.kind not in "iu":
            raise ValueError("token ids must be a 1-d or 2-d integer array")
        if ids.shape[1] == 0 or np.any(ids[:, 0] != 0):
            raise ValueError("every sequence must start with [BOS]")
        if np.any(ids < 0) or np.any(ids >= len(self.cfg.vocab)):
            raise KeyError("token id outside the vocabulary")
        return ids

    # -- forward ---------------------------------------------------------
    def embed(self, ids: np.ndarray) -> Tensor:
        h = nx.embedding(self._p("embed"), ids)
        if self.cfg.pe == "sincos":
            table = pe.sinusoid_table(np.arange(ids.shape[1]), self.cfg.d_model).astype(self.dtype)
            h = nx.add(h, Tensor(np.broadcast_to(table, h.shape).copy()))
        return h

    def _hooks(self, layer: int, n: int):
        kind = self.cfg.pe
        d_head = self.cfg.head.d_head
        if kind == "rotary":
            return (lambda q, k: (pe.rotary(q), pe.rotary(k))), None
        if kind == "alibi":
            bias = pe.alibi_bias(self.cfg.n_heads, n).astype(self.dtype)

            def alibi(e, q, k):
                return nx.add(e, Tensor(np.broadcast_to(bias, e.shape).copy()))
            return None, alibi
        if kind == "relative":
            p = f"layers.{layer}.attn."
            u, v, w_r = self._p(p + "rel_u"), self._p(p + "rel_v"), self._p(p + "rel_w")

            def relative(e, q, k):
                return nx.add(e, nx.scale(pe.relative_terms(q, k, u, v, w_r), 1.0 / np.sqrt(d_head)))
            return None, relative
        return None, None

    def layer(self, h: Tensor, l: int, mask: np.ndarray | None, record: bool = False) -> Tensor:
        p = f"layers.{l}."
        attn = AttentionParams(*(self._p(p + "attn." + w) for w in ("w_q", "w_k", "w_v", "w_o")))
        qk_hook, score_hook = self._hooks(l, h.shape[1])
        kept: list | None = [] if record else None
        m = multi_head_self_attention(h, attn, self.cfg.head, mask, qk_hook, score_hook, kept)
        h_m = nx.layer_norm(nx.add(m, h), self._p(p + "ln1.g"), self._p(p + "ln1.b"))
        inner = nx.relu(nx.add_bias(nx.matmul(h_m, self._p(p + "ffn.w1")), self._p(p + "ffn.b1")))
        ffn = nx.add_bias(nx.matmul(inner, self._p(p + "ffn.w2")), self._p(p + "ffn.b2"))
        h_f = nx.layer_norm(nx.add(ffn, h_m), self._p(p + "ln2.g"), self._p(p + "ln2.b"))
        trace = LayerTrace(attention=kept[0] if kept else None)
        if self.cfg.stack:
            s = stack_sublayer(h_f, self._p(p + "stack.w_a"), self._p(p + "stack.b_a"))
            h_f = s.out
            trace.alphas, trace.actions = s.alphas.data, s.actions.data
        if record:
            self.trace.append(trace)
        return h_f

    def attention_mask(self, n: int) -> np.ndarray | None:
        return anchored_future_mask(n) if self.cfg.mode == "alm" else None

    def encode(self, ids, record: bool = False) -> Tensor:
        """``(B, N+1)`` ids -> final states ``(B, N+1, D)``."""
        ids = self._check_ids(ids)
        if record:
            self.trace = []
        h = self.embed(ids)
        mask = self.attention_mask(ids.shape[1])
        for l in range(self.cfg.n_layers):
            h = self.layer(h, l, mask, record)
        return h

    def logits(self, ids, record: bool = False) -> Tensor:
        """Output-class logits for every row, ``(B, N+1, C)``."""
        h = self.encode(ids, record)
        return nx.add_bias(nx.matmul(h, self._p("head.w")), self._p("head.b"))

    def mlm_logits(self, ids, record: bool = False) -> Tensor:
        """Logits over ``Sigma + [MASK]`` for the N real positions (``[BOS]`` row dropped)."""
        if self.cfg.mode != "mlm":
            raise ValueError("model is not configured for masked language modelling")
        arr = self._check_ids(ids)
        if not np.all((arr == self.cfg.vocab.stoi[MASK]).any(axis=1)):
            raise ValueError("MLM input contains no [MASK] token")
        return self.logits(arr, record)[:, 1:]

    def alm_logits(self, ids, record: bool = False) -> Tensor:
        """Row ``t - 1`` holds the logits for token ``t`` given tokens ``< t``."""
        if self.cfg.mode != "alm":
            raise ValueError("model is not configured for autoregressive language modelling")
        return self.logits(ids, record)

    def next_token_logits(self, prefix) -> np.ndarray:
        """Distribution logits over ``Sigma + [EOS]`` after a ``[BOS]``-initial prefix."""
        arr = np.asarray(prefix)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.shape[1] == 0:
            raise ValueError("empty prefix: ALM prefixes start with [BOS]")
        with nx.no_grad():
            return self.alm_logits(arr).data[:, -1]
