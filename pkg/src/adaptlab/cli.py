"""``adaptlab`` command line.

Exit codes: 0 success, 1 invalid input (config, data, arguments, files),
2 a failed self-check.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import config as config_mod
from .data import DataError, check_vocab, read_preferences
from .harness import TRAIN_KINDS, cmd_adapt, cmd_train, initial_params
from .merge import merge_from_spec
from .numeric import RngStream
from .schedules import ALRConfig, ScheduleConfig, effective_lr
from .tokenizer import Tokenizer, compare_tokenizers, efficiency_metrics, train_bpe
from .toy_lm import save_checkpoint
from .upscale import dus_plan, outermost_duplicate
from .verify import run_checks

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2
log = logging.getLogger("adaptlab")


def _text_arg(args) -> str:
    if args.text is not None:
        return args.text
    if args.file is not None:
        return Path(args.file).read_text(encoding="utf-8")
    return sys.stdin.read()


def _print_rows(rows: list[dict]) -> None:
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_tokenizer(args) -> int:
    if args.action == "train":
        corpus = Path(args.corpus).read_text(encoding="utf-8").splitlines()
        tok = train_bpe(corpus, args.vocab_size, args.isolate_digits, args.isolate_punctuation)
        tok.save(args.out)
        print(f"wrote {args.out}: {tok.vocab_size} tokens, {len(tok.merges)} merges")
    elif args.action == "encode":
        print(" ".join(map(str, Tokenizer.load(args.model[0]).encode(_text_arg(args)))))
    elif args.action == "stats":
        tok = Tokenizer.load(args.model[0])
        _print_rows([efficiency_metrics(tok, _text_arg(args), Path(args.model[0]).stem).row()])
    else:
        models = [Tokenizer.load(p) for p in args.model]
        names = args.name or [Path(p).stem for p in args.model]
        if len(names) != len(models):
            raise ValueError("give one --name per --model")
        _print_rows([r.row() for r in compare_tokenizers(models, _text_arg(args), names)])
    return EXIT_OK


def cmd_plan(args) -> int:
    print(outermost_duplicate(dus_plan(args.n, args.m), args.k).dumps())
    return EXIT_OK


def cmd_schedule(args) -> int:
    sched = ScheduleConfig(args.peak_lr, args.final_lr, args.warmup, args.total, args.shape)
    alr_cfg = ALRConfig(args.peak_lr, args.ref_batch_tokens) if args.batch_tokens is not None else None
    tokens = args.batch_tokens or 0
    print("step,lr")
    for step in range(args.total + 1):
        print(f"{step},{effective_lr(sched, alr_cfg, step, tokens)!r}")
    return EXIT_OK


def _load_config(path) -> dict:
    return config_mod.load(path) if path else config_mod.resolve({"version": config_mod.CONFIG_VERSION})


def _finish(params, report, cfg) -> int:
    out = config_mod.output_dir(cfg)
    report.write(out, params)
    print(f"{report.command}: {len(report.rows)} steps, checksum {report.checksum[:16]}, wrote {out}")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _load_config(args.config)
    params = initial_params(cfg, RngStream(cfg["seed"]))
    save_checkpoint(params, args.out)
    print(f"wrote {args.out}: {params.n_params()} parameters, checksum {params.checksum()[:16]}")
    return EXIT_OK


def cmd_adapt_cli(args) -> int:
    cfg = config_mod.load(args.config)
    return _finish(*cmd_adapt(cfg), cfg)


def cmd_train_cli(args) -> int:
    cfg = config_mod.load(args.config)
    return _finish(*cmd_train(args.kind, cfg), cfg)


def cmd_merge(args) -> int:
    merged = merge_from_spec(args.spec)
    save_checkpoint(merged, args.out)
    print(f"wrote {args.out}: checksum {merged.checksum()[:16]}")
    return EXIT_OK


def cmd_validate_prefs(args) -> int:
    examples = read_preferences(args.path)
    if args.vocab_size is not None:
        check_vocab(max(max(e.prompt + e.chosen + e.rejected) for e in examples), args.vocab_size, args.path)
    print(f"{args.path}: {len(examples)} valid preference records")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(corrupt_gradient=args.corrupt_gradient, n_configs=args.configs)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_CHECK if failed else EXIT_OK


def cmd_config(args) -> int:
    if args.action == "schema":
        print(json.dumps(config_mod.SCHEMA, indent=2, sort_keys=True))
    else:
        sys.stdout.write(config_mod.dumps(_load_config(args.config)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"adaptlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tokenizer", help="train, apply and measure BPE tokenizers")
    t.add_argument("action", choices=["train", "encode", "stats", "compare"])
    t.add_argument("--corpus", help="training text, one document per line")
    t.add_argument("--vocab-size", type=int)
    t.add_argument("--isolate-digits", action="store_true")
    t.add_argument("--isolate-punctuation", action="store_true")
    t.add_argument("--out")
    t.add_argument("--model", action="append", default=[])
    t.add_argument("--name", action="append")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--text")
    src.add_argument("--file")
    t.set_defaults(func=cmd_tokenizer)

    pl = sub.add_parser("plan", help="print a depth up-scaling plan")
    pl.add_argument("--n", type=int, required=True)
    pl.add_argument("--m", type=int, default=0)
    pl.add_argument("--k", type=int, default=0)
    pl.set_defaults(func=cmd_plan)

    s = sub.add_parser("schedule", help="print the learning rate for every step as CSV")
    s.add_argument("--peak-lr", type=float, required=True)
    s.add_argument("--final-lr", type=float, default=0.0)
    s.add_argument("--warmup", type=int, default=0)
    s.add_argument("--total", type=int, required=True)
    s.add_argument("--shape", choices=["cosine", "constant"], default="cosine")
    s.add_argument("--batch-tokens", type=int, help="loss tokens per batch; enables the adaptive LR factor")
    s.add_argument("--ref-batch-tokens", type=int, default=16)
    s.set_defaults(func=cmd_schedule)

    i = sub.add_parser("init", help="write a freshly initialised checkpoint")
    i.add_argument("--config")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_init)

    a = sub.add_parser("adapt", help="embedding transfer, up-scaling, frozen then full training")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_adapt_cli)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("kind", choices=TRAIN_KINDS)
    tr.add_argument("--config", required=True)
    tr.set_defaults(func=cmd_train_cli)

    m = sub.add_parser("merge", help="linear merge of checkpoints")
    m.add_argument("--spec", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    vp = sub.add_parser("validate-prefs", help="check a preference JSONL file")
    vp.add_argument("path")
    vp.add_argument("--vocab-size", type=int)
    vp.set_defaults(func=cmd_validate_prefs)

    v = sub.add_parser("verify", help="run the built-in invariant and gradient checks")
    v.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    v.add_argument("--configs", type=int, default=20, help="random configurations per gradient check")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("config", help="print the resolved config or the JSON schema")
    c.add_argument("action", choices=["show", "schema"])
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)
    return p


def _check_tokenizer_args(args) -> None:
    if args.command != "tokenizer":
        return
    need = {"train": ("corpus", "vocab_size", "out")}.get(args.action, ())
    for key in need:
        if getattr(args, key) is None:
            raise ValueError(f"tokenizer {args.action} needs --{key.replace('_', '-')}")
    if args.action in ("encode", "stats") and len(args.model) != 1:
        raise ValueError(f"tokenizer {args.action} needs exactly one --model")
    if args.action == "compare" and not args.model:
        raise ValueError("tokenizer compare needs at least one --model")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for usage errors
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _check_tokenizer_args(args)
        return args.func(args)
    except (config_mod.ConfigError, DataError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"adaptlab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
