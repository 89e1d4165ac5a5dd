"""Attention-map export: CSV matrices, PGM images and argmax action traces."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import tasks as tk
from .model import StackTransformer
from .stack import ACTIONS


def write_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(matrix):
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def pgm_bytes(matrix: np.ndarray) -> bytes:
    """Binary greyscale image with pixel value ``round(255 * a)``."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("PGM export needs a 2-d matrix")
    pixels = np.clip(np.rint(255.0 * m), 0, 255).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def write_pgm(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(matrix))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def model_input(model: StackTransformer, inst: tk.TaskInstance) -> list[str]:
    """MLM: ``[BOS] x [MASK]...``; ALM: the teacher-forced ``[BOS] x y``."""
    if model.cfg.mode == "mlm":
        return tk.make_mlm_input(inst)[0]
    return tk.alm_training_sequence(inst)[0]


def action_labels(actions: np.ndarray) -> list[str]:
    """Argmax action per position; ``[BOS]`` (no action) is labelled ``-``."""
    return ["-"] + [ACTIONS[int(k)].label for k in np.asarray(actions).argmax(-1)]


def dump_attention(model: StackTransformer, inst: tk.TaskInstance, out_dir) -> list[Path]:
    """Write per-layer stack attention (and per-head self-attention) for one instance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens = model_input(model, inst)
    ids = np.array([model.cfg.vocab.encode(tokens)])
    with nx.no_grad():
        model.logits(ids, record=True)
    written: list[Path] = []
    (out / "tokens.txt").write_text("\n".join(tokens) + "\n", encoding="utf-8")
    written.append(out / "tokens.txt")
    for l, trace in enumerate(model.trace):
        if trace.alphas is not None:
            alphas = trace.alphas[0]
            write_csv(out / f"layer{l}_stack.csv", alphas)
            write_pgm(out / f"layer{l}_stack.pgm", alphas)
            labels = action_labels(trace.actions[0])
            rows = [f"{i}\t{tok}\t{lab}" for i, (tok, lab) in enumerate(zip(tokens, labels))]
            (out / f"layer{l}_actions.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
            written += [out / f"layer{l}_stack.csv", out / f"layer{l}_stack.pgm",
                        out / f"layer{l}_actions.tsv"]
        if trace.attention is not None:
            for m, head in enumerate(trace.attention[0]):
                write_csv(out / f"layer{l}_head{m}.csv", head)
                write_pgm(out / f"layer{l}_head{m}.pgm", head)
                written += [out / f"layer{l}_head{m}.csv", out / f"layer{l}_head{m}.pgm"]
    return written


def stack_tops(model: StackTransformer, inst: tk.TaskInstance) -> list[Sequence[int]]:
    """Per layer, the argmax of each position's stack attention row."""
    dump_ids = np.array([model.cfg.vocab.encode(model_input(model, inst))])
    with nx.no_grad():
        model.logits(dump_ids, record=True)
    return [t.alphas[0].argmax(-1).tolist() for t in model.trace if t.alphas is not None]
