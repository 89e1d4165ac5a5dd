"""The four deterministic context-free transduction tasks.

RS  reverse string            a b b            -> b b a
SM  stack manipulation        b a b [POP] ...  -> final stack top->bottom, [PAD]-filled
MA  modular arithmetic        ( 1 + 2 ) * 3 ≡  -> 4
SE  solve equation            ( 1 + z ) + 2 ≡ 2 -> 4

Generators carry their own bookkeeping for the target; :func:`oracle`
recomputes it independently from ``x`` alone.  Arithmetic tokens use ASCII
``-`` and ``*``; ``−`` and ``·`` are accepted when tokenizing text.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

from .model import BOS, EOS, MASK, PAD, Vocabulary

MOD = 5
DIGITS = tuple(str(d) for d in range(MOD))
PUSH_A, PUSH_B, POP = "[PUSH a]", "[PUSH b]", "[POP]"
EQUIV = "≡"

_ALIASES = {"−": "-", "·": "*", "×": "*", "=": EQUIV}


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at token {position}")
        self.position = position


def tokenize(text: str) -> list[str]:
    """Split text into symbols: bracketed names are one token, otherwise one char each."""
    return [_ALIASES.get(t, t) for t in re.findall(r"\[[^\]]*\]|\S", text)]


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------------
# oracles


def oracle_rs(x: Sequence[str]) -> list[str]:
    return list(reversed(x))


def oracle_sm(x: Sequence[str]) -> list[str]:
    stack: list[str] = []
    seen_op = False
    for pos, tok in enumerate(x):
        if tok in ("a", "b"):
            if seen_op:
                raise ParseError("stack symbol after an operation", pos)
            stack.append(tok)
        elif tok == PUSH_A:
            seen_op = True
            stack.append("a")
        elif tok == PUSH_B:
            seen_op = True
            stack.append("b")
        elif tok == POP:
            seen_op = True
            if stack:
                stack.pop()
        else:
            raise ParseError(f"unexpected symbol {tok!r}", pos)
    out = stack[::-1]
    return out + [PAD] * (len(x) + 1 - len(out))


class _Evaluator:
    """Recursive-descent evaluator mod 5 with the usual precedence.

    expr   := term (("+" | "-") term)*
    term   := factor ("*" factor)*
    factor := digit | "z" | "(" expr ")" | "-" factor
    """

    def __init__(self, tokens: Sequence[str], z: int | None = None, allow_mul: bool = True):
        self.toks = tokens
        self.pos = 0
        self.z = z
        self.allow_mul = allow_mul

    def peek(self) -> str | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", self.pos)
        self.pos += 1
        return tok

    def expr(self) -> int:
        val = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            val = (val + rhs) % MOD if op == "+" else (val - rhs) % MOD
        return val

    def term(self) -> int:
        val = self.factor()
        while self.peek() == "*":
            if not self.allow_mul:
                raise ParseError("multiplication is not allowed here", self.pos)
            self.take()
            val = (val * self.factor()) % MOD
        return val

    def factor(self) -> int:
        start = self.pos
        tok = self.take()
        if tok in DIGITS:
            return int(tok)
        if tok == "z":
            if self.z is None:
                raise ParseError("variable z is not allowed here", start)
            return self.z
        if tok == "-":
            return (-self.factor()) % MOD
        if tok == "(":
            val = self.expr()
            if self.take() != ")":
                raise ParseError("expected ')'", self.pos - 1)
            return val
        raise ParseError(f"unexpected symbol {tok!r}", start)


def evaluate_expression(tokens: Sequence[str], z: int | None = None, allow_mul: bool = True) -> int:
    ev = _Evaluator(tokens, z, allow_mul)
    val = ev.expr()
    if ev.pos != len(tokens):
        raise ParseError(f"trailing symbol {tokens[ev.pos]!r}", ev.pos)
    return val


def oracle_ma(x: Sequence[str]) -> list[str]:
    if not x or x[-1] != EQUIV:
        raise ParseError("expression must end with ≡", len(x))
    if EQUIV in x[:-1]:
        raise ParseError("extra ≡", list(x).index(EQUIV))
    if "z" in x:
        raise ParseError("variable z is not allowed here", list(x).index("z"))
    return [str(evaluate_expression(x[:-1]))]


def oracle_se(x: Sequence[str]) -> list[str]:
    x = list(x)
    if len(x) < 3 or x[-2] != EQUIV or x[-1] not in DIGITS:
        raise ParseError("equation must end with '≡ c'", max(len(x) - 2, 0))
    lhs = x[:-2]
    if lhs.count("z") != 1:
        raise ParseError("equation must mention z exactly once", 0)
    if EQUIV in lhs:
        raise ParseError("extra ≡", lhs.index(EQUIV))
    c = int(x[-1])
    sols = [z for z in range(MOD) if evaluate_expression(lhs, z, allow_mul=False) == c]
    if len(sols) != 1:
        raise ParseError(f"equation has {len(sols)} solutions", 0)
    return [str(sols[0])]


# ---------------------------------------------------------------------------
# generators


def gen_rs(length: int, rng: random.Random) -> tuple[list[str], list[str]]:
    if length < 1:
        raise ValueError("RS needs length >= 1")
    x = rng.choices(("a", "b"), k=length)
    return x, x[::-1]


def gen_sm(length: int, rng: random.Random) -> tuple[list[str], list[str]]:
    if length < 2:
        raise ValueError("SM needs length >= 2 (one stack symbol and one operation)")
    k = rng.randint(1, length - 1)
    x = rng.choices(("a", "b"), k=k)
    stack = list(x)
    for _ in range(length - k):
        op = rng.choice((PUSH_A, PUSH_B, POP))
        x.append(op)
        if op == POP:
            if stack:
                stack.pop()
        else:
            stack.append("a" if op == PUSH_A else "b")
    y = stack[::-1]
    return x, y + [PAD] * (length + 1 - len(y))


# Expression trees: ("d", int) | ("z",) | ("neg", t) | ("par", t) | (op, l, r)


def _sample_expr(n: int, rng: random.Random, allow_mul: bool) -> tuple:
    """Tree whose printed form has exactly ``n`` tokens, respecting precedence."""
    if n >= 3 and rng.random() < 0.5:
        k = rng.randint(1, n - 2)
        return (rng.choice("+-"), _sample_expr(k, rng, allow_mul), _sample_term(n - 1 - k, rng, allow_mul))
    return _sample_term(n, rng, allow_mul)


def _sample_term(n: int, rng: random.Random, allow_mul: bool) -> tuple:
    if allow_mul and n >= 3 and rng.random() < 0.5:
        k = rng.randint(1, n - 2)
        return ("*", _sample_term(k, rng, allow_mul), _sample_factor(n - 1 - k, rng, allow_mul))
    return _sample_factor(n, rng, allow_mul)


def _sample_factor(n: int, rng: random.Random, allow_mul: bool) -> tuple:
    if n == 1:
        return ("d", rng.randrange(MOD))
    if n == 2 or rng.random() < 0.3:
        return ("neg", _sample_factor(n - 1, rng, allow_mul))
    return ("par", _sample_expr(n - 2, rng, allow_mul))


def _render(t: tuple) -> list[str]:
    kind = t[0]
    if kind == "d":
        return [str(t[1])]
    if kind == "z":
        return ["z"]
    if kind == "neg":
        return ["-"] + _render(t[1])
    if kind == "par":
        return ["("] + _render(t[1]) + [")"]
    return _render(t[1]) + [kind] + _render(t[2])


def _value(t: tuple, z: int = 0) -> int:
    kind = t[0]
    if kind == "d":
        return t[1]
    if kind == "z":
        return z
    if kind == "neg":
        return -_value(t[1], z) % MOD
    if kind == "par":
        return _value(t[1], z)
    a, b = _value(t[1], z), _value(t[2], z)
    return {"+": a + b, "-": a - b, "*": a * b}[kind] % MOD


def _leaves(t: tuple, path=()) -> list[tuple]:
    if t[0] == "d":
        return [path]
    return [p for i, c in enumerate(t[1:], start=1) for p in _leaves(c, path + (i,))]


def _replace(t: tuple, path: tuple, new: tuple) -> tuple:
    if not path:
        return new
    i = path[0]
    return t[:i] + (_replace(t[i], path[1:], new),) + t[i + 1:]


MA_MAX_TRIES = 64


def gen_ma(length: int, rng: random.Random) -> tuple[list[str], list[str]]:
    """Expression of exactly ``length`` tokens (``≡`` included).

    The target residue is drawn uniformly first and expressions are resampled
    until one evaluates to it (bounded tries), so outputs are near-uniform.
    """
    if length < 2:
        raise ValueError("MA needs length >= 2 (a constant and ≡)")
    target = rng.randrange(MOD)
    for _ in range(MA_MAX_TRIES):
        tree = _sample_expr(length - 1, rng, allow_mul=True)
        if _value(tree) == target:
            break
    return _render(tree) + [EQUIV], [str(_value(tree))]


def gen_se(length: int, rng: random.Random) -> tuple[list[str], list[str]]:
    """Equation ``E ≡ c`` of exactly ``length`` tokens with one ``z`` in ``E``.

    ``z`` replaces a uniformly chosen constant; its value is drawn uniformly
    and ``c`` is computed from it.
    """
    if length < 3:
        raise ValueError("SE needs length >= 3 (z, ≡ and a constant)")
    tree = _sample_expr(length - 2, rng, allow_mul=False)
    leaves = _leaves(tree)
    tree = _replace(tree, leaves[rng.randrange(len(leaves))], ("z",))
    z = rng.randrange(MOD)
    return _render(tree) + [EQUIV, str(_value(tree, z))], [str(z)]


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class TaskSpec:
    name: str
    input_alphabet: tuple[str, ...]
    output_alphabet: tuple[str, ...]
    min_len: int
    generate: Callable[[int, random.Random], tuple[list[str], list[str]]]
    oracle: Callable[[Sequence[str]], list[str]]
    output_len: Callable[[int], int]

    @property
    def alphabet(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.input_alphabet + self.output_alphabet))

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.alphabet, self.output_alphabet)


TASKS: dict[str, TaskSpec] = {
    "rs": TaskSpec("rs", ("a", "b"), ("a", "b"), 1, gen_rs, oracle_rs, lambda n: n),
    "sm": TaskSpec("sm", ("a", "b", PUSH_A, PUSH_B, POP), ("a", "b", PAD), 2, gen_sm, oracle_sm,
                   lambda n: n + 1),
    "ma": TaskSpec("ma", DIGITS + ("+", "-", "*", "(", ")", EQUIV), DIGITS, 2, gen_ma, oracle_ma,
                   lambda n: 1),
    "se": TaskSpec("se", DIGITS + ("+", "-", "(", ")", EQUIV, "z"), DIGITS, 3, gen_se, oracle_se,
                   lambda n: 1),
}


def get_task(name: str) -> TaskSpec:
    key = name.lower()
    if key not in TASKS:
        raise KeyError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")
    return TASKS[key]


def oracle(task: str, x: Sequence[str]) -> list[str]:
    return get_task(task).oracle(list(x))


@dataclass(frozen=True)
class TaskInstance:
    task: str
    x: tuple[str, ...]
    y: tuple[str, ...]
    split: str = "train"

    def verify(self) -> "TaskInstance":
        expected = tuple(oracle(self.task, self.x))
        if expected != self.y:
            raise ValueError(f"{self.task} instance {detokenize(self.x)!r}: target "
                             f"{detokenize(self.y)!r} != oracle {detokenize(expected)!r}")
        return self

    def to_line(self) -> str:
        return f"{self.task}\t{detokenize(self.x)}\t{detokenize(self.y)}"

    @classmethod
    def from_line(cls, line: str, split: str = "test") -> "TaskInstance":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ValueError(f"expected 3 tab-separated fields, got {len(parts)}")
        task, x, y = parts
        return cls(task, tuple(tokenize(x)), tuple(tokenize(y)), split)


def instance_rng(task: str, seed: int, index: int) -> random.Random:
    # string seeds hash through sha512, stable across platforms and runs
    return random.Random(f"{task}:{seed}:{index}")


def generate(task: str, length: int, rng: random.Random, split: str = "train") -> TaskInstance:
    spec = get_task(task)
    x, y = spec.generate(length, rng)
    return TaskInstance(spec.name, tuple(x), tuple(y), split)


def length_range(task: str, lo: int, hi: int) -> range:
    """Admissible ``|x|`` in ``[lo, hi]`` for the task (clipped to its minimum)."""
    return range(max(lo, get_task(task).min_len), hi + 1)


def make_dataset(task: str, count: int, lo: int, hi: int, seed: int, split: str = "test") -> list[TaskInstance]:
    """``count`` instances with ``|x|`` uniform over the admissible lengths in ``[lo, hi]``."""
    lengths = list(length_range(task, lo, hi))
    if not lengths:
        raise ValueError(f"no admissible {task} lengths in [{lo}, {hi}]")
    out = []
    for i in range(count):
        rng = instance_rng(task, seed, i)
        out.append(generate(task, rng.choice(lengths), rng, split))
    return out


def balanced_dataset(task: str, per_length: int, lo: int, hi: int, seed: int,
                     split: str = "test") -> list[TaskInstance]:
    """``per_length`` instances at every admissible length in ``[lo, hi]``."""
    out = []
    for n in length_range(task, lo, hi):
        for i in range(per_length):
            out.append(generate(task, n, instance_rng(task, seed, n * 1_000_003 + i), split))
    return out


def write_dataset(path, instances: Iterable[TaskInstance]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(inst.to_line() + "\n")
            n += 1
    return n


def read_dataset(path, split: str = "test") -> list[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_line(line, split).verify() for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# model interface


def score(pred: Sequence[str], gold: Sequence[str]) -> float | None:
    """Per-token accuracy ignoring positions where ``gold`` is ``[PAD]``.

    Returns ``None`` when every gold position is padding.
    """
    if len(pred) != len(gold):
        raise ValueError(f"prediction has {len(pred)} symbols, gold has {len(gold)}")
    counted = [p == g for p, g in zip(pred, gold) if g != PAD]
    if not counted:
        return None
    return sum(counted) / len(counted)


def dataset_accuracy(scores: Iterable[float | None]) -> float:
    vals = [s for s in scores if s is not None]
    return sum(vals) / len(vals) if vals else float("nan")


def make_mlm_input(inst: TaskInstance) -> tuple[list[str], list[int], list[str]]:
    """``[BOS] x [MASK]^|y|``, the mask positions (BOS = position 0) and their targets."""
    seq = [BOS, *inst.x] + [MASK] * len(inst.y)
    start = 1 + len(inst.x)
    return seq, list(range(start, start + len(inst.y))), list(inst.y)


def make_alm_episode(inst: TaskInstance) -> tuple[list[str], list[str], int]:
    """Prefix ``[BOS] x``, gold continuation ``y`` and the number of decode steps."""
    return [BOS, *inst.x], list(inst.y), len(inst.y)


def alm_training_sequence(inst: TaskInstance) -> tuple[list[str], list[str]]:
    """Teacher-forced input ``[BOS] x y`` and row-aligned targets ``x y [EOS]``."""
    return [BOS, *inst.x, *inst.y], [*inst.x, *inst.y, EOS]


def iter_batches(task: str, lo: int, hi: int, batch: int, seed: int,
                 forbid_above: int | None = None) -> Iterator[list[TaskInstance]]:
    """Endless stream of same-length training batches; step ``s`` is keyed by ``(seed, s)``."""
    lengths = list(length_range(task, lo, hi))
    if not lengths:
        raise ValueError(f"no admissible {task} lengths in [{lo}, {hi}]")
    step = 0
    while True:
        rng = random.Random(f"batch:{task}:{seed}:{step}")
        n = rng.choice(lengths)
        if forbid_above is not None and n > forbid_above:
            raise AssertionError(f"training batch of length {n} exceeds the training bound {forbid_above}")
        yield [generate(task, n, rng, "train") for _ in range(batch)]
        step += 1
