"""Adam, the online training loop, evaluation and run records."""

from __future__ import annotations

import json
import math
import random
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from . import tasks as tk
from .model import ModelConfig, StackTransformer
from .numerics import Tensor

# held-out sets are drawn from a seed that no training run uses
TEST_SEED = 20_231_207


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite; the partial record is attached."""

    def __init__(self, message: str, record: "RunRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    task: str = "rs"
    lr: float = 1e-3
    batch: int = 32
    steps: int = 10_000
    seed: int = 0
    eval_every: int = 1_000
    train_min: int = 1
    train_len: int = 8
    test_len: int = 16
    test_per_length: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 0.0  # global grad-norm clip; 0 disables
    loss_on_prefix: bool = False
    sample: bool = False  # ALM: sample instead of greedy decoding

    def __post_init__(self):
        tk.get_task(self.task)
        if not 1 <= self.train_min <= self.train_len < self.test_len:
            raise ValueError(f"need 1 <= train_min <= train_len < test_len, got "
                             f"{self.train_min}, {self.train_len}, {self.test_len}")
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1:
            raise ValueError("steps must be >= 0, batch and eval_every >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def desk_profile(task: str, **overrides) -> TrainConfig:
    """Small CPU profile: |x| in [1, 8] for training, (8, 16] for testing."""
    base = dict(task=task, lr=3e-4, batch=32, steps=20_000, eval_every=1_000,
                train_min=tk.get_task(task).min_len, train_len=8, test_len=16)
    base.update(overrides)
    return TrainConfig(**base)


def paper_profile(task: str, **overrides) -> TrainConfig:
    """Full-size recipe: lr 1e-4; |x| <= 40 train, (40, 100] test."""
    long_tasks = task.lower() in ("ma", "se")
    base = dict(task=task, lr=1e-4, batch=128 if long_tasks else 32,
                steps=1_000_000 if long_tasks else 100_000, eval_every=10_000,
                train_min=tk.get_task(task).min_len, train_len=40, test_len=100)
    base.update(overrides)
    return TrainConfig(**base)


PROFILES = {"desk": desk_profile, "paper": paper_profile}


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; moments are kept in the parameters' dtype."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {p.name or 'parameter'} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# batching and loss


def _output_class_ids(model: StackTransformer) -> np.ndarray:
    classes = model.cfg.vocab.classes(model.cfg.mode)
    return np.array([classes.index(s) for s in model.cfg.vocab.output_symbols])


def mlm_batch(model: StackTransformer, batch: Sequence[tk.TaskInstance]):
    voc = model.cfg.vocab
    rows, targets = [], []
    for inst in batch:
        seq, _, tgt = tk.make_mlm_input(inst)
        rows.append(voc.encode(seq))
        targets.append(voc.class_ids(tgt, "mlm"))
    return np.array(rows), np.array(targets)


def alm_batch(model: StackTransformer, batch: Sequence[tk.TaskInstance]):
    voc = model.cfg.vocab
    rows, targets = [], []
    for inst in batch:
        seq, tgt = tk.alm_training_sequence(inst)
        rows.append(voc.encode(seq))
        targets.append(voc.class_ids(tgt, "alm"))
    return np.array(rows), np.array(targets)


def batch_loss(model: StackTransformer, batch: Sequence[tk.TaskInstance],
               loss_on_prefix: bool = False) -> Tensor:
    """Mean cross-entropy over output positions of a same-length batch."""
    n_x, n_y = len(batch[0].x), len(batch[0].y)
    if any(len(b.x) != n_x or len(b.y) != n_y for b in batch):
        raise ValueError("batch instances must share input and output lengths")
    if model.cfg.mode == "mlm":
        ids, targets = mlm_batch(model, batch)
        logits = model.mlm_logits(ids)[:, n_x:]
        return nx.cross_entropy(logits, targets)
    ids, targets = alm_batch(model, batch)
    logits = model.alm_logits(ids)
    # row t predicts token t+1; targets are x y [EOS]
    start = 0 if loss_on_prefix else n_x
    return nx.cross_entropy(logits[:, start:], targets[:, start:])


# ---------------------------------------------------------------------------
# evaluation


def predict(model: StackTransformer, batch: Sequence[tk.TaskInstance], sample: bool = False,
            rng: np.random.Generator | None = None) -> list[list[str]]:
    """Predicted outputs for a same-length batch, restricted to the task's output symbols."""
    voc = model.cfg.vocab
    allowed = _output_class_ids(model)
    out_syms = np.array(voc.output_symbols, dtype=object)
    n_x, n_y = len(batch[0].x), len(batch[0].y)
    with nx.no_grad():
        if model.cfg.mode == "mlm":
            ids, _ = mlm_batch(model, batch)
            logits = model.mlm_logits(ids).data[:, n_x:][..., allowed]
            return [list(row) for row in out_syms[logits.argmax(-1)]]
        prefix = np.array([voc.encode(tk.make_alm_episode(b)[0]) for b in batch])
        produced = []
        for _ in range(n_y):
            logits = model.next_token_logits(prefix)[:, allowed].astype(np.float64)
            if sample:
                rng = rng if rng is not None else np.random.default_rng(0)
                p = np.exp(logits - logits.max(-1, keepdims=True))
                p /= p.sum(-1, keepdims=True)
                choice = np.array([rng.choice(len(allowed), p=row) for row in p])
            else:
                choice = logits.argmax(-1)
            syms = out_syms[choice]
            produced.append(syms)
            prefix = np.concatenate([prefix, np.array([voc.encode(syms)]).T], axis=1)
        return [list(r) for r in np.stack(produced, axis=1)]


def group_by_shape(dataset: Iterable[tk.TaskInstance]) -> list[list[tk.TaskInstance]]:
    groups: dict[tuple[int, int], list[tk.TaskInstance]] = {}
    for inst in dataset:
        groups.setdefault((len(inst.x), len(inst.y)), []).append(inst)
    return [groups[k] for k in sorted(groups)]


def evaluate(model: StackTransformer, dataset: Sequence[tk.TaskInstance], sample: bool = False,
             seed: int = 0, chunk: int = 128) -> float:
    """Mean per-token accuracy over ``dataset`` (MLM: one pass; ALM: |y| decode steps)."""
    rng = np.random.default_rng(seed)
    scores = []
    for group in group_by_shape(dataset):
        for i in range(0, len(group), chunk):
            part = group[i:i + chunk]
            for inst, pred in zip(part, predict(model, part, sample, rng)):
                scores.append(tk.score(pred, inst.y))
    return tk.dataset_accuracy(scores)


def test_set(cfg: TrainConfig) -> list[tk.TaskInstance]:
    return tk.balanced_dataset(cfg.task, cfg.test_per_length, cfg.train_len + 1, cfg.test_len,
                               TEST_SEED, split="test")


# ---------------------------------------------------------------------------
# records


@dataclass
class EvalPoint:
    step: int
    loss: float
    accuracy: float
    wall: float = field(default=0.0, compare=False)


@dataclass
class RunRecord:
    """Evaluation history of one run; equality ignores wall-clock time."""

    model: dict
    train: dict
    points: list[EvalPoint] = field(default_factory=list)
    status: str = "running"

    @property
    def final_accuracy(self) -> float:
        return self.points[-1].accuracy if self.points else float("nan")

    def loss_at(self, step: int) -> float:
        for p in self.points:
            if p.step == step:
                return p.loss
        raise KeyError(f"no evaluation at step {step}")

    def to_lines(self) -> list[str]:
        head = {"kind": "run", "model": self.model, "train": self.train}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps({"kind": "eval", **asdict(p)}, sort_keys=True) for p in self.points]
        lines.append(json.dumps({"kind": "end", "status": self.status, "final_accuracy": self.final_accuracy}))
        return lines

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        rec = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if obj["kind"] == "run":
                    rec = cls(obj["model"], obj["train"])
                elif obj["kind"] == "eval":
                    obj.pop("kind")
                    rec.points.append(EvalPoint(**obj))
                elif obj["kind"] == "end":
                    rec.status = obj["status"]
        if rec is None:
            raise ValueError(f"{path}: no run header")
        return rec


# ---------------------------------------------------------------------------
# loop


def train_loop(model_cfg: ModelConfig, cfg: TrainConfig,
               log: Callable[[EvalPoint], None] | None = None,
               dtype=np.float32) -> tuple[StackTransformer, RunRecord]:
    """Train on a fresh same-length batch per step, evaluating on a fixed held-out set."""
    model = StackTransformer(model_cfg, seed=cfg.seed, dtype=dtype)
    record = RunRecord(model_cfg.as_dict(), cfg.as_dict())
    held_out = test_set(cfg)
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    batches = tk.iter_batches(cfg.task, cfg.train_min, cfg.train_len, cfg.batch, cfg.seed,
                              forbid_above=cfg.train_len)
    t0 = time.perf_counter()
    window: list[float] = []

    def checkpoint(step: int) -> None:
        loss = float(np.mean(window)) if window else float("nan")
        point = EvalPoint(step, loss, evaluate(model, held_out, cfg.sample, cfg.seed),
                          time.perf_counter() - t0)
        record.points.append(point)
        window.clear()
        if log is not None:
            log(point)

    try:
        for step in range(cfg.steps + 1):
            batch = next(batches)
            nx.zero_grad(params)
            loss = batch_loss(model, batch, cfg.loss_on_prefix)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}")
            window.append(value)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                checkpoint(step)
            if step == cfg.steps:
                break
            nx.backward(loss)
            if cfg.clip > 0:
                clip_grad_norm(params, cfg.clip)
            opt.step()
    except (TrainingDiverged, FloatingPointError) as exc:
        record.status = "diverged"
        raise TrainingDiverged(str(exc), record) from exc
    record.status = "ok"
    return model, record


@dataclass
class SweepSummary:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.accuracies) if len(self.accuracies) > 1 else 0.0

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"


def seed_sweep(model_cfg: ModelConfig, cfg: TrainConfig, seeds: Iterable[int],
               log: Callable[[int, EvalPoint], None] | None = None):
    records = []
    for seed in seeds:
        hook = (lambda p, s=seed: log(s, p)) if log else None
        _, rec = train_loop(model_cfg, replace(cfg, seed=seed), hook)
        records.append(rec)
    return records, SweepSummary([r.final_accuracy for r in records])


def summary_table(results: dict[tuple[str, str], SweepSummary]) -> str:
    """Tasks as rows, model variants as columns, cells ``mean ± std`` in percent."""
    task_names = list(dict.fromkeys(t for t, _ in results))
    variants = list(dict.fromkeys(v for _, v in results))
    lines = ["\t".join(["task"] + variants)]
    for t in task_names:
        cells = [str(results[(t, v)]) if (t, v) in results else "-" for v in variants]
        lines.append("\t".join([t.upper()] + cells))
    return "\n".join(lines) + "\n"
