"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort
(including a failed property suite). ``WTA_SPIKE_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, energy, properties
from .config import TaskConfig, format_flat, load_config, to_flat
from .errors import CheckpointError, ConfigError, InputError, TrainingAborted
from .training import Task, evaluate, load_checkpoint, train
from .wta import WTAKind, hard_wta, sparsemax, sparsemax_support, topk_wta

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _thread_limit():
    raw = os.environ.get("WTA_SPIKE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"WTA_SPIKE_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def write_manifest(path: Path, flat: dict, extra: dict) -> None:
    lines = dict(flat)
    lines.update({f"run.{k}": v for k, v in extra.items()})
    path.write_text(format_flat(lines), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", to_flat(cfg), {
        "seed": cfg.seed, "config": args.config, "out": str(out), "metrics": "metrics.csv",
        "checkpoint": "final.ckpt", "version": __version__})
    res = train(cfg, out, progress=lambda s, tl, m: print(f"step={s} train_loss={tl:.6f} val {m.line()}"))
    print(f"final {res.final_val.line()}")
    print(f"checkpoint={res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    task = None
    if args.task:
        stored = loaded.train_config
        base = stored.task if stored is not None else TaskConfig()
        task = base if base.name == args.task else TaskConfig(name=args.task)
    print(evaluate(args.ckpt, task, batches=args.batches).line())
    return EXIT_OK


def _energy_tokens(loaded, seed: int) -> np.ndarray:
    tcfg = loaded.train_config
    if tcfg is not None:
        return Task(tcfg.task).batch(tcfg.seed, "val", 0, tcfg.batch_size).tokens
    cfg = loaded.model.config
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, (8, min(cfg.max_len, 16)))


def cmd_energy(args) -> int:
    if args.tokens < 1:
        raise UsageError("--tokens must be positive")
    loaded = load_checkpoint(args.ckpt)
    tokens = _energy_tokens(loaded, args.seed)
    report = energy.model_energy_report(loaded.model, tokens, args.tokens)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".energy.csv")
    report.write_csv(out)
    print(f"energy_csv={out}")
    print(f"total_mJ={report.total_mj:.9g}")
    print(energy.assert_mul_free(loaded.model, tokens))
    return EXIT_OK


def format_values(values, binary: bool) -> str:
    if binary:
        return ",".join(str(int(v)) for v in values)
    return ",".join(f"{v:.6f}" for v in values)


def cmd_wta_demo(args) -> int:
    try:
        a = np.array([float(t) for t in args.input.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse --input {args.input!r} as comma-separated floats") from None
    if not np.all(np.isfinite(a)):
        raise UsageError("--input values must be finite")
    kind = WTAKind.parse(args.kind)
    if kind.variant == "hard":
        out = hard_wta(a)
    elif kind.variant == "topk":
        out = topk_wta(a, kind.k)
    elif kind.binarize_support:
        out = sparsemax_support(a)
    else:
        out = sparsemax(a)
    print(format_values(out, kind.binary))
    return EXIT_OK


def cmd_property_suite(args) -> int:
    results = properties.run_all(args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_ABORT


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wtaspike", description="Spike-driven WTA transformer toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=("copy", "mlm-synthetic", "char-lm"), default=None)
    e.add_argument("--batches", type=int, default=8)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("energy", help="theoretical energy report and multiplication audit")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--tokens", type=int, default=energy.DEFAULT_TOKENS)
    g.add_argument("--out", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_energy)

    w = sub.add_parser("wta-demo", help="apply a WTA layer to a vector")
    w.add_argument("--input", required=True)
    w.add_argument("--kind", default="hard")
    w.set_defaults(fn=cmd_wta_demo)

    s = sub.add_parser("property-suite", help="run the randomized invariant checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_property_suite)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
