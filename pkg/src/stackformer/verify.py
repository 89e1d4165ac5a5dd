"""Randomised verification sweeps used by the ``verify`` command and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import positional as pe
from .model import ModelConfig, StackTransformer, Vocabulary
from .numerics import Tensor
from .stack import StackOp, check_theorem1, check_theorem2, random_actions, random_ops

GOLDEN_OPS = (StackOp.PUSH, StackOp.PUSH, StackOp.PUSH, StackOp.POP, StackOp.NOOP, StackOp.POP)
GOLDEN_PEEKS = [0, 1, 2, 3, 2, 2, 1]


@dataclass
class SweepReport:
    name: str
    trials: int
    max_error: float
    tolerance: float
    counterexample: dict | None = None
    details: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.counterexample is None and self.max_error < self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.ok else "FAIL"
        return f"{verdict} {self.name}: {self.trials} trials, max error {self.max_error:.3e} (tol {self.tolerance:g})"


def theorem1_sweep(trials: int = 1000, seed: int = 0, max_len: int = 50, tol: float = 1e-12) -> SweepReport:
    """Hard-op sequences plus the golden trace against the exact stack."""
    rng = np.random.default_rng(seed)
    report = SweepReport("one-hot actions track the exact stack", trials + 1, 0.0, tol)
    golden = check_theorem1(GOLDEN_OPS, tol=tol)
    cases = [list(GOLDEN_OPS)] + [random_ops(rng, int(rng.integers(1, max_len + 1))) for _ in range(trials)]
    results = [golden] + [check_theorem1(ops, tol=tol) for ops in cases[1:]]
    if golden.peeks != GOLDEN_PEEKS:
        report.counterexample = {"ops": [o.label for o in GOLDEN_OPS], "peeks": golden.peeks,
                                 "expected": GOLDEN_PEEKS}
    for ops, res in zip(cases, results):
        report.max_error = max(report.max_error, res.max_deviation)
        if not res.ok and report.counterexample is None:
            report.counterexample = {"ops": [o.label for o in ops], "step": res.first_divergence,
                                     "deviation": res.max_deviation}
    return report


def theorem2_sweep(trials: int = 1000, seed: int = 0, max_len: int = 100, tol: float = 1e-9) -> SweepReport:
    """Dirichlet-sampled soft actions; every stack attention must sum to one."""
    rng = np.random.default_rng(seed)
    report = SweepReport("soft stack attentions stay normalised", trials, 0.0, tol)
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        conc = float(rng.choice([0.1, 1.0, 10.0]))
        actions = random_actions(rng, n, conc)
        res = check_theorem2(actions, tol=tol)
        report.max_error = max(report.max_error, res.max_deviation)
        if not res.ok and report.counterexample is None:
            report.counterexample = {"actions": actions.tolist(), "deviation": res.max_deviation,
                                     "causal": res.causal}
    return report


def random_layer_case(rng: np.random.Generator):
    """A float64 one-layer stack model, an input batch and a random scalar readout."""
    heads = int(rng.choice([1, 2]))
    # width >= 4: layer norm over two features is constant up to sign, so its
    # gradient vanishes and finite differences only measure roundoff
    d = heads * int(rng.choice([4, 6]))
    kind = str(rng.choice(pe.KINDS))
    mode = str(rng.choice(["mlm", "alm"]))
    vocab = Vocabulary(["a", "b", "c"])
    cfg = ModelConfig(vocab, n_layers=1, d_model=d, n_heads=heads, ffn_dim=2 * d, pe=kind,
                      stack=True, mode=mode)
    model = StackTransformer(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith((".b", ".b1", ".b2", "b_a")) or name.endswith(".g"):
            # non-trivial gains and biases so every path carries gradient
            p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    b, n = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    h = Tensor(rng.normal(0.0, 1.0, (b, n, d)), requires_grad=True, name="input")
    weights = Tensor(rng.normal(0.0, 1.0, (b, n, d)))
    return model, h, weights


def layer_loss(model: StackTransformer, h: Tensor, weights: Tensor) -> Tensor:
    mask = model.attention_mask(h.shape[1])
    return nx.sum(nx.mul(model.layer(h, 0, mask), weights))


def gradcheck_sweep(trials: int = 20, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> SweepReport:
    """Autodiff vs central differences through one full stack-augmented layer."""
    rng = np.random.default_rng(seed)
    report = SweepReport("layer gradients match finite differences", trials, 0.0, tol)
    for trial in range(trials):
        model, x, w = random_layer_case(rng)
        inputs = [x] + [p for k, p in model.params.items() if k.startswith("layers.0.")]
        err = nx.gradcheck(lambda: layer_loss(model, x, w), inputs, h=h)
        report.details.append((model.cfg.as_dict(), err))
        report.max_error = max(report.max_error, err)
        if err >= tol and report.counterexample is None:
            report.counterexample = {"trial": trial, "config": model.cfg.as_dict(), "error": err}
    return report
