"""Checkpoints: a plain-text manifest plus one little-endian float32 blob.

Manifest lines are ``key=value``; structural values are JSON.  Each
parameter gets ``param=<name> <shape> <offset>`` where shape is
comma-separated and offset counts float32 elements into ``params.bin``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import ModelConfig, StackTransformer, Vocabulary
from .numerics import Tensor

MANIFEST = "manifest.txt"
BLOB = "params.bin"
FORMAT = "stackformer-checkpoint/1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(directory, model: StackTransformer, extra: dict | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    lines = [f"format={FORMAT}"]
    lines += [f"model.{k}={json.dumps(v)}" for k, v in cfg.as_dict().items()]
    lines.append(f"vocab.symbols={json.dumps(cfg.vocab.sigma, ensure_ascii=False)}")
    lines.append(f"vocab.outputs={json.dumps(cfg.vocab.output_symbols, ensure_ascii=False)}")
    for k, v in (extra or {}).items():
        lines.append(f"extra.{k}={json.dumps(v, ensure_ascii=False)}")
    offset = 0
    blocks = []
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype=_DTYPE)
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param={name} {shape} {offset}")
        blocks.append(arr.reshape(-1))
        offset += arr.size
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    np.concatenate(blocks).astype(_DTYPE).tofile(out / BLOB)
    return out


def read_manifest(directory) -> tuple[dict, list[tuple[str, tuple[int, ...], int]]]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"{path}: missing manifest")
    entries: dict = {}
    params = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}:{n}: expected key=value")
        if key == "param":
            name, shape, offset = value.split(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            params.append((name, dims, int(offset)))
        elif key == "format":
            entries[key] = value
        else:
            try:
                entries[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"{path}:{n}: bad value for {key}") from exc
    if entries.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {entries.get('format')!r}")
    return entries, params


def load_checkpoint(directory) -> tuple[StackTransformer, dict]:
    """Rebuild the model; returns it with the ``extra.*`` manifest entries."""
    entries, layout = read_manifest(directory)
    vocab = Vocabulary(entries["vocab.symbols"], entries["vocab.outputs"])
    model_keys = {k[len("model."):]: v for k, v in entries.items() if k.startswith("model.")}
    cfg = ModelConfig(vocab, **model_keys)
    blob = np.fromfile(Path(directory) / BLOB, dtype=_DTYPE)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape, offset in layout:
        size = int(np.prod(shape)) if shape else 1
        if offset + size > blob.size:
            raise CheckpointError(f"parameter {name} runs past the end of {BLOB}")
        data = blob[offset:offset + size].reshape(shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    expected = StackTransformer(cfg, seed=0).params
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in params):
        raise CheckpointError("checkpoint parameters do not match the model configuration")
    extra = {k[len("extra."):]: v for k, v in entries.items() if k.startswith("extra.")}
    return StackTransformer(cfg, params=params), extra
