"""Index-set stack, differentiable stack attention and the duality checks.

Positions run ``0..N`` with position 0 reserved for ``[BOS]``, which stands
for the empty stack.  A stack attention ``alpha_i`` is a length ``N+1``
distribution over positions saying where the current stack top was pushed.

Action vectors are ordered ``(PUSH, POP, NO-OP)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SUM_TOL = 1e-6


class StackOp(enum.IntEnum):
    PUSH = 0
    POP = 1
    NOOP = 2

    @property
    def label(self) -> str:
        return "NO-OP" if self is StackOp.NOOP else self.name


ACTIONS = tuple(StackOp)


@dataclass(frozen=True)
class HardStack:
    """Exact stack over position indices, bottom to top."""

    gamma: tuple[int, ...] = ()

    def push(self, i: int) -> "HardStack":
        return HardStack(self.gamma + (i,))

    def pop(self) -> "HardStack":
        return HardStack(self.gamma[:-1]) if self.gamma else self

    def peek(self) -> int:
        return self.gamma[-1] if self.gamma else 0

    def __len__(self) -> int:
        return len(self.gamma)


def hard_step(s: HardStack, op: StackOp, i: int) -> HardStack:
    if op is StackOp.PUSH:
        return s.push(i)
    if op is StackOp.POP:
        return s.pop()
    return s


def hard_run(ops: Sequence[StackOp]) -> list[HardStack]:
    """States ``gamma_0..gamma_N`` after applying ``ops`` from the empty stack."""
    states = [HardStack()]
    for i, op in enumerate(ops, start=1):
        states.append(hard_step(states[-1], StackOp(op), i))
    return states


def onehot(index: int, size: int, dtype=np.float64) -> np.ndarray:
    v = np.zeros(size, dtype=dtype)
    v[index] = 1.0
    return v


# ---------------------------------------------------------------------------
# single-sequence soft recursion


@dataclass
class StackAttnState:
    """``alpha_0..alpha_i`` computed so far plus the actions that produced them."""

    n: int
    alphas: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def initial(cls, n: int, dtype=np.float64) -> "StackAttnState":
        return cls(n, [onehot(0, n + 1, dtype)], [])

    @property
    def step(self) -> int:
        return len(self.alphas) - 1

    def matrix(self) -> np.ndarray:
        return np.stack(self.alphas)


def soft_push(i: int, n: int, dtype=np.float64) -> np.ndarray:
    if not 1 <= i <= n:
        raise IndexError(f"push index {i} outside 1..{n}")
    return onehot(i, n + 1, dtype)


def soft_pop(alphas: Sequence[np.ndarray]) -> np.ndarray:
    """Candidate after POP at step ``i = len(alphas)``, given ``alpha_0..alpha_{i-1}``.

    The top's weight on position ``j >= 1`` moves to ``alpha_{j-1}``, the
    stack as it was just before ``j`` was pushed; weight on the empty stack
    stays on ``alpha_0``.
    """
    i = len(alphas)
    if i < 1:
        raise ValueError("soft_pop needs at least alpha_0")
    prev = alphas[i - 1]
    out = prev[0] * alphas[0]
    if i > 1:
        out = out + prev[1:i] @ np.stack(alphas[: i - 1])
    return out


def _validate_action(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64 if not isinstance(a, np.ndarray) else a.dtype)
    if a.shape != (3,):
        raise ValueError(f"action distribution must have 3 entries, got shape {a.shape}")
    if np.any(a < 0) or abs(float(a.sum()) - 1.0) > SUM_TOL:
        raise ValueError(f"invalid action distribution {a.tolist()}")
    return a


def soft_step(state: StackAttnState, a_i: np.ndarray, i: int | None = None) -> np.ndarray:
    """Append ``alpha_i``, the action-weighted superposition of PUSH, POP and NO-OP."""
    a = _validate_action(a_i)
    i = state.step + 1 if i is None else i
    if i != state.step + 1:
        raise ValueError(f"soft_step expected step {state.step + 1}, got {i}")
    prev = state.alphas[-1]
    alpha = (a[StackOp.PUSH] * soft_push(i, state.n, prev.dtype)
             + a[StackOp.POP] * soft_pop(state.alphas)
             + a[StackOp.NOOP] * prev)
    state.alphas.append(alpha)
    state.actions.append(a)
    return alpha


def run_soft(actions: np.ndarray) -> StackAttnState:
    """Drive :func:`soft_step` over an ``(N, 3)`` array of action distributions."""
    actions = np.asarray(actions)
    state = StackAttnState.initial(actions.shape[0], actions.dtype)
    for a in actions:
        soft_step(state, a)
    return state


# ---------------------------------------------------------------------------
# batched recursion as a differentiable op


def alpha_recursion(actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass over ``(B, N, 3)`` actions.

    Returns ``alphas`` of shape ``(B, N+1, N+1)`` and the POP candidates used
    at each step (kept for the backward pass).  Strictly sequential in ``i``.
    """
    b, n, _ = actions.shape
    t = n + 1
    alphas = np.zeros((b, t, t), dtype=actions.dtype)
    pops = np.zeros_like(alphas)
    alphas[:, 0, 0] = 1.0
    for i in range(1, t):
        prev = alphas[:, i - 1]
        pop = prev[:, 0:1] * alphas[:, 0]
        if i > 1:
            pop = pop + np.matmul(prev[:, None, 1:i], alphas[:, : i - 1])[:, 0]
        pops[:, i] = pop
        a = actions[:, i - 1]
        alpha = a[:, StackOp.POP, None] * pop + a[:, StackOp.NOOP, None] * prev
        alpha[:, i] += a[:, StackOp.PUSH]
        alphas[:, i] = alpha
    return alphas, pops


def _alpha_recursion_backward(actions: np.ndarray, alphas: np.ndarray, pops: np.ndarray,
                              g_alphas: np.ndarray) -> np.ndarray:
    t = alphas.shape[1]
    g = g_alphas.copy()
    g_act = np.zeros_like(actions)
    for i in range(t - 1, 0, -1):
        gi = g[:, i]
        prev = alphas[:, i - 1]
        a = actions[:, i - 1]
        g_act[:, i - 1, StackOp.PUSH] = gi[:, i]
        g_act[:, i - 1, StackOp.POP] = (gi * pops[:, i]).sum(axis=1)
        g_act[:, i - 1, StackOp.NOOP] = (gi * prev).sum(axis=1)
        g_pop = a[:, StackOp.POP, None] * gi
        g[:, i - 1] += a[:, StackOp.NOOP, None] * gi
        # pop = prev[0] * alpha_0 + sum_{j=1}^{i-1} prev[j] * alpha_{j-1}
        g[:, i - 1, 0] += (g_pop * alphas[:, 0]).sum(axis=1)
        if i > 1:
            g[:, i - 1, 1:i] += np.matmul(alphas[:, : i - 1], g_pop[:, :, None])[:, :, 0]
            g[:, : i - 1] += prev[:, 1:i, None] * g_pop[:, None, :]
    return g_act


def stack_attention(actions: Tensor) -> Tensor:
    """Differentiable ``(B, N, 3)`` actions -> ``(B, N+1, N+1)`` stack attentions."""
    if actions.ndim != 3 or actions.shape[-1] != 3:
        raise nx.ShapeError(f"stack_attention expects (B, N, 3) actions, got {actions.shape}")
    alphas, pops = alpha_recursion(actions.data)
    return nx.custom_op(alphas, (actions,),
                        lambda g: (_alpha_recursion_backward(actions.data, alphas, pops, g),))


def precompute_alphas(ops: Sequence[StackOp], dtype=np.float64) -> list[np.ndarray]:
    """Stack attentions for a known hard op sequence, no hidden states involved."""
    n = len(ops)
    if n == 0:
        return [onehot(0, 1, dtype)]
    actions = np.zeros((1, n, 3), dtype=dtype)
    actions[0, np.arange(n), [int(o) for o in ops]] = 1.0
    alphas, _ = alpha_recursion(actions)
    return list(alphas[0])


# ---------------------------------------------------------------------------
# sublayer pieces


def action_distribution(h: Tensor, w_a: Tensor, b_a: Tensor) -> Tensor:
    """``softmax(W_A h + b_A)`` over (PUSH, POP, NO-OP) for rows of ``h`` (``[..., D]``)."""
    if w_a.shape != (3, h.shape[-1]) or b_a.shape != (3,):
        raise nx.ShapeError(f"action_distribution: W_A {w_a.shape}, b_A {b_a.shape}, h {h.shape}")
    if h.ndim == 1:
        logits = nx.add(nx.reshape(nx.matmul(w_a, nx.reshape(h, (-1, 1))), (3,)), b_a)
    else:
        logits = nx.add_bias(nx.matmul(h, nx.transpose(w_a)), b_a)
    return nx.softmax(logits, axis=-1)


def stack_readout(h: Tensor, alphas: Tensor) -> Tensor:
    """Row ``i`` of the result is ``sum_n alpha_i(n) h_n``; row 0 of ``h`` is ``[BOS]``."""
    if alphas.shape[-1] != h.shape[-2]:
        raise nx.ShapeError(f"stack_readout: alphas {alphas.shape} vs states {h.shape}")
    return nx.matmul(alphas, h)


@dataclass
class StackOutput:
    out: Tensor
    alphas: Tensor
    actions: Tensor


def stack_sublayer(h: Tensor, w_a: Tensor, b_a: Tensor) -> StackOutput:
    """Residual stack sublayer on ``(B, N+1, D)`` (or ``(N+1, D)``) states; no layer norm."""
    single = h.ndim == 2
    if single:
        h = nx.reshape(h, (1,) + h.shape)
    actions = action_distribution(h[:, 1:], w_a, b_a)
    alphas = stack_attention(actions)
    out = nx.add(stack_readout(h, alphas), h)
    if single:
        out = nx.reshape(out, out.shape[1:])
        alphas = nx.reshape(alphas, alphas.shape[1:])
        actions = nx.reshape(actions, actions.shape[1:])
    return StackOutput(out, alphas, actions)


# ---------------------------------------------------------------------------
# duality checks


@dataclass
class Theorem1Result:
    ok: bool
    peeks: list[int]
    max_deviation: float
    first_divergence: int | None = None


def check_theorem1(ops: Sequence[StackOp], n: int | None = None, tol: float = 1e-12) -> Theorem1Result:
    """Run the soft recursion with one-hot actions in lockstep with :class:`HardStack`."""
    ops = [StackOp(o) for o in ops]
    n = len(ops) if n is None else n
    if len(ops) != n:
        raise ValueError(f"expected {n} operations, got {len(ops)}")
    state = StackAttnState.initial(n)
    hard = HardStack()
    peeks = [hard.peek()]
    worst = float(np.max(np.abs(state.alphas[0] - onehot(0, n + 1))))
    first = None if worst <= tol else 0
    for i, op in enumerate(ops, start=1):
        alpha = soft_step(state, onehot(int(op), 3))
        hard = hard_step(hard, op, i)
        peeks.append(hard.peek())
        dev = float(np.max(np.abs(alpha - onehot(hard.peek(), n + 1))))
        worst = max(worst, dev)
        if dev > tol and first is None:
            first = i
    return Theorem1Result(first is None, peeks, worst, first)


@dataclass
class Theorem2Result:
    ok: bool
    max_deviation: float
    causal: bool


def check_theorem2(actions: np.ndarray, n: int | None = None, tol: float = 1e-9) -> Theorem2Result:
    """Every ``alpha_i`` produced from valid ``(N, 3)`` actions sums to one."""
    actions = np.asarray(actions, dtype=np.float64)
    if n is not None and actions.shape[0] != n:
        raise ValueError(f"expected {n} action distributions, got {actions.shape[0]}")
    state = run_soft(actions)
    mat = state.matrix()
    dev = float(np.max(np.abs(mat.sum(axis=1) - 1.0)))
    causal = bool(np.all(np.triu(mat, k=1) == 0.0))
    return Theorem2Result(dev <= tol and causal, dev, causal)


def random_ops(rng: np.random.Generator, n: int) -> list[StackOp]:
    return [StackOp(int(k)) for k in rng.integers(0, 3, size=n)]


def random_actions(rng: np.random.Generator, n: int, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(3, concentration), size=n)
