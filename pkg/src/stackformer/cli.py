"""Command-line entry point: gen, train, eval, verify, dump-attention.

Exit codes: 0 success, 1 verification or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from . import tasks as tk
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import DESK_SCALE, PAPER_SCALE, ModelConfig
from .train import (PROFILES, SweepSummary, TrainConfig, TrainingDiverged, evaluate,
                    summary_table, train_loop)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_range(text: str) -> tuple[int, int]:
    """``"1..8"`` -> ``(1, 8)``; a single number means that length only."""
    lo, sep, hi = text.partition("..")
    try:
        bounds = (int(lo), int(hi) if sep else int(lo))
    except ValueError:
        raise UsageError(f"bad length range {text!r}; expected LO..HI") from None
    if bounds[0] < 1 or bounds[0] > bounds[1]:
        raise UsageError(f"bad length range {text!r}; need 1 <= LO <= HI")
    return bounds


def thread_cap() -> int | None:
    raw = os.environ.get("STACKFORMER_THREADS")
    if raw is None or raw == "":
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise UsageError(f"STACKFORMER_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


# ---------------------------------------------------------------------------
# run configuration

MODEL_KEYS = {"layers": int, "d_model": int, "heads": int, "ffn_dim": int, "pe": str,
              "stack": "bool", "mode": str}
# field annotations are strings under postponed evaluation
TRAIN_KEYS = {f.name: {"float": float, "int": int, "bool": "bool"}.get(str(f.type), str)
              for f in fields(TrainConfig)}
RUN_KEYS = {"profile": str, "seeds": str}
MANIFEST_ONLY = {"version", "out"}


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "on", "yes"):
        return True
    if v in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, kind):
    if kind == "bool":
        return parse_bool(value)
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def resolve_run(file_values: dict[str, str], flag_values: dict[str, str]):
    """Merge profile defaults, config file and flags (flags win)."""
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(RUN_KEYS) | MANIFEST_ONLY
    unknown = sorted(set(merged) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if "task" not in merged:
        raise UsageError("no task given (use --task or task= in the config)")
    profile = merged.get("profile", "desk")
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    bad = []
    train_over, model_over = {}, {}
    for key, value in merged.items():
        try:
            if key in TRAIN_KEYS:
                train_over[key] = _coerce(value, TRAIN_KEYS[key])
            elif key in MODEL_KEYS:
                model_over[key] = _coerce(value, MODEL_KEYS[key])
        except ValueError:
            bad.append(key)
    if bad:
        raise UsageError(f"invalid values for: {', '.join(sorted(bad))}")
    try:
        task = tk.get_task(train_over["task"])
        train_cfg = PROFILES[profile](task.name, **{k: v for k, v in train_over.items() if k != "task"})
        scale = dict(PAPER_SCALE if profile == "paper" else DESK_SCALE)
        model_cfg = ModelConfig(task.vocabulary(),
                                n_layers=model_over.get("layers", scale["n_layers"]),
                                d_model=model_over.get("d_model", scale["d_model"]),
                                n_heads=model_over.get("heads", scale["n_heads"]),
                                ffn_dim=model_over.get("ffn_dim", 0),
                                pe=model_over.get("pe", "none"),
                                stack=model_over.get("stack", True),
                                mode=model_over.get("mode", "mlm"))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"conflicting configuration: {exc}") from None
    try:
        seeds = [int(s) for s in merged["seeds"].split(",")] if merged.get("seeds") else [train_cfg.seed]
    except ValueError:
        raise UsageError("invalid values for: seeds") from None
    return profile, model_cfg, train_cfg, seeds


def manifest_lines(profile: str, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds, out) -> list[str]:
    m = model_cfg.as_dict()
    values = {"profile": profile, "layers": m["n_layers"], "d_model": m["d_model"], "heads": m["n_heads"],
              "ffn_dim": m["ffn_dim"], "pe": m["pe"], "stack": "on" if m["stack"] else "off",
              "mode": m["mode"], **train_cfg.as_dict(), "seeds": ",".join(str(s) for s in seeds),
              "version": __version__, "out": str(out)}
    return [f"{k}={v}" for k, v in values.items()]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    lo, hi = parse_range(args.len)
    spec = tk.get_task(args.task)
    if hi < spec.min_len:
        raise UsageError(f"{spec.name} needs |x| >= {spec.min_len}; range {args.len} is empty")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    data = tk.make_dataset(spec.name, args.count, lo, hi, args.seed, split=args.split)
    agree = sum(tuple(tk.oracle(spec.name, inst.x)) == inst.y for inst in data)
    tk.write_dataset(args.out, data)
    print(f"wrote {len(data)} {spec.name} instances to {args.out}; oracle agreement {agree}/{len(data)}")
    return EXIT_OK if agree == len(data) else EXIT_FAIL


def _flag_values(args) -> dict[str, str]:
    names = ["task", "profile", "lr", "batch", "steps", "seed", "eval_every", "pe", "stack", "mode",
             "layers", "d_model", "heads", "seeds", "test_per_length", "clip"]
    out = {n: (None if getattr(args, n) is None else str(getattr(args, n))) for n in names}
    if args.loss_on_prefix:
        out["loss_on_prefix"] = "true"
    if args.sample:
        out["sample"] = "true"
    return out


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    for key in MANIFEST_ONLY:
        file_values.pop(key, None)
    profile, model_cfg, train_cfg, seeds = resolve_run(file_values, _flag_values(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text("\n".join(manifest_lines(profile, model_cfg, train_cfg, seeds, out)) + "\n",
                                      encoding="utf-8")
    accuracies = []
    for seed in seeds:
        cfg = TrainConfig(**{**train_cfg.as_dict(), "seed": seed})
        run_dir = out / f"seed{seed}" if len(seeds) > 1 else out
        run_dir.mkdir(parents=True, exist_ok=True)

        def log(p, seed=seed):
            if not args.quiet:
                print(f"seed {seed} step {p.step:>7} loss {p.loss:.4f} test acc {p.accuracy:.4f}", flush=True)

        try:
            model, record = train_loop(model_cfg, cfg, log)
        except TrainingDiverged as exc:
            if exc.record is not None:
                exc.record.save(run_dir / "records.jsonl")
            print(f"error: seed {seed} diverged: {exc}", file=sys.stderr)
            return EXIT_FAIL
        record.save(run_dir / "records.jsonl")
        save_checkpoint(run_dir / "checkpoint", model, {"task": cfg.task, "seed": seed})
        accuracies.append(record.final_accuracy)
        print(f"seed {seed}: final test accuracy {record.final_accuracy:.4f}")
    summary = SweepSummary(accuracies)
    variant = ("stack" if model_cfg.stack else "vanilla") + ("" if model_cfg.pe == "none" else f"+{model_cfg.pe}")
    (out / "summary.tsv").write_text(summary_table({(train_cfg.task, variant): summary}), encoding="utf-8")
    print(f"{train_cfg.task.upper()} {variant}: {summary} (per-token accuracy %, {len(seeds)} seed(s))")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError, KeyError, ValueError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.data:
        data = tk.read_dataset(args.data)
    else:
        task = args.task or extra.get("task")
        if task is None:
            raise UsageError("give --data or --task")
        lo, hi = parse_range(args.len)
        data = tk.make_dataset(task, args.count, lo, hi, args.seed)
    acc = evaluate(model, data, sample=args.sample, seed=args.seed)
    print(f"accuracy {acc:.4f} over {len(data)} instances")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    if args.what == "theorems":
        reports = [verify.theorem1_sweep(args.trials, args.seed),
                   verify.theorem2_sweep(args.trials, args.seed)]
    else:
        reports = [verify.gradcheck_sweep(args.trials if args.trials_given else 20, args.seed)]
    ok = True
    for r in reports:
        print(r.line())
        if not r.ok:
            ok = False
            print("counterexample: " + json.dumps(r.counterexample))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump_attention(args) -> int:
    from .export import dump_attention

    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError, KeyError, ValueError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL
    task = args.task or extra.get("task")
    if task is None:
        raise UsageError("checkpoint has no task; pass --task")
    x = tuple(tk.tokenize(args.instance))
    try:
        inst = tk.TaskInstance(task, x, tuple(tk.oracle(task, x)))
        written = dump_attention(model, inst, args.out)
    except (tk.ParseError, KeyError) as exc:
        raise UsageError(f"bad instance {args.instance!r}: {exc}") from None
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stackformer", description="Stack-attention transformers on formal transduction tasks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a dataset file")
    g.add_argument("--task", required=True, choices=sorted(tk.TASKS), type=str.lower)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--len", default="1..8", help="input length range LO..HI")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="test", choices=["train", "test"])
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one or more seeds")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--task", type=str.lower)
    t.add_argument("--profile", choices=sorted(PROFILES))
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seeds for a sweep")
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--test-per-length", dest="test_per_length", type=int)
    t.add_argument("--pe", choices=["none", "sincos", "relative", "rotary", "alibi"])
    t.add_argument("--stack", choices=["on", "off"])
    t.add_argument("--mode", choices=["mlm", "alm"])
    t.add_argument("--layers", type=int)
    t.add_argument("--d-model", dest="d_model", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--clip", type=float)
    t.add_argument("--loss-on-prefix", action="store_true")
    t.add_argument("--sample", action="store_true", help="ALM: sample instead of greedy decoding")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--task", type=str.lower)
    e.add_argument("--len", default="9..16")
    e.add_argument("--count", type=int, default=512)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sample", action="store_true")

    v = sub.add_parser("verify", help="theorem or gradient checks")
    v.add_argument("what", choices=["theorems", "gradcheck"])
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("dump-attention", help="export stack attention maps for one input")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--instance", required=True, help="input x, e.g. 'abb' or 'b a [POP]'")
    d.add_argument("--task", type=str.lower)
    d.add_argument("--out", required=True)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "dump-attention": cmd_dump_attention}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        thread_cap()
        args = parser.parse_args(argv)
        if args.command == "verify":
            args.trials_given = args.trials is not None
            if args.trials is None:
                args.trials = 1000
            if args.trials < 1:
                raise UsageError("--trials must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
