"""``qbtlab`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, config_from_dict, dump_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
BLEU_FIELDS = ("checkpoint", "generator", "split", "bleu", "p1", "p2", "p3", "p4", "brevity_penalty", "hyp_len", "ref_len")

log = logging.getLogger("qbtlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={args.output_dir}")
    if getattr(args, "data_dir", None):
        overrides.append(f"data_dir={args.data_dir}")
    if overrides:
        seed = cfg.seed
        cfg = apply_overrides(cfg, overrides)
        if not any(o.startswith("seed=") for o in overrides):
            cfg.seed = seed  # keep a QBTLAB_SEED override
    return cfg


def _load_task_for(args):
    from .runner import prepare_task
    from .synthdata import load_task

    if getattr(args, "data_dir", None) and not getattr(args, "config", None):
        return load_task(args.data_dir)
    return prepare_task(_config(args))


def _check_vocab(model, task, what="checkpoint"):
    from .runner import UsageError

    if model.cfg.vocab_size != task.vocab.size:
        raise UsageError(f"{what} vocabulary ({model.cfg.vocab_size}) does not match the task ({task.vocab.size})")


def _report_row(ckpt, gen, split, rep) -> dict:
    p = list(rep.precisions) + [0.0] * (4 - len(rep.precisions))
    return {"checkpoint": str(ckpt), "generator": gen, "split": split, "bleu": rep.bleu, "p1": p[0], "p2": p[1],
            "p3": p[2], "p4": p[3], "brevity_penalty": rep.brevity_penalty, "hyp_len": rep.hyp_len, "ref_len": rep.ref_len}


def _write_report(out_dir: Path, row: dict, stem: str = "bleu_report") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BLEU_FIELDS)
        w.writeheader()
        w.writerow({k: row[k] for k in BLEU_FIELDS})
    (out_dir / f"{stem}.json").write_text(json.dumps(row, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .synthdata import generate_task, save_task

    cfg = _config(args)
    d = cfg.resolved_data_dir
    if d.exists() and any(d.iterdir()) and not args.force:
        print(f"refusing to overwrite non-empty {d}; pass --force", file=sys.stderr)
        return EXIT_USAGE
    task = generate_task(cfg.task)
    hashes = save_task(task, d)
    dump_config(cfg, d / "config.yaml")
    print(json.dumps({"data_dir": str(d), "spec_hash": cfg.task.spec_hash(), "files": hashes}, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    from .runner import run_training

    cfg = _config(args)
    res = run_training(cfg, args.schedule, init_checkpoint=args.init_checkpoint, resume=args.resume)
    print(json.dumps({"output_dir": str(res.output_dir), "final_checkpoint": str(res.final_checkpoint),
                      "wall_clock_s": res.wall_clock_s, "test_bleu": res.test_bleu}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .runner import evaluate_bleu

    model, _, _ = load_checkpoint(args.checkpoint)
    task = _load_task_for(args)
    _check_vocab(model, task)
    pset = task.test if args.split == "test" else task.valid
    directions = ("s", "t") if args.lang == "both" else (args.lang,)
    rep = evaluate_bleu(model, pset, args.generator, limit=args.limit, directions=directions)
    row = _report_row(args.checkpoint, args.generator, args.split, rep)
    _write_report(Path(args.out), row)
    print(json.dumps(row, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_generation, bench_training_throughput, write_throughput_csv
    from .checkpoint import load_checkpoint
    from .synthdata import Vocab

    model, _, _ = load_checkpoint(args.checkpoint)
    vocab = Vocab((model.cfg.vocab_size - 4) // 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recs = bench_generation(model, vocab, lengths=args.lengths, batch_size=args.batch_size, reps=args.reps,
                            seed=args.seed, threads=args.threads)
    write_throughput_csv(out / "throughput.csv", recs)
    summary = {"generation": [{k: getattr(r, k) for k in r.FIELDS} for r in recs], "training": []}
    if args.train_seconds > 0:
        task = _load_task_for(args)
        _check_vocab(model, task)
        for kind in ("EBT", "EBTD", "BT"):
            tp = bench_training_throughput(kind, model, task.train, args.train_seconds, args.batch_size,
                                           seed=args.seed, threads=args.threads)
            summary["training"].append(tp.to_dict())
        with open(out / "training_throughput.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(summary["training"][0]))
            w.writeheader()
            w.writerows(summary["training"])
    (out / "throughput.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_self_bleu(args) -> int:
    from .checkpoint import load_checkpoint
    from .runner import translate
    from .evaluation import self_bleu

    task = _load_task_for(args)
    pset = task.test if args.split == "test" else task.valid
    sources, oracle = pset.direction(args.lang)
    sources, oracle = sources[:args.n], oracle[:args.n]

    def outputs(ckpt, gen):
        if ckpt == "oracle":
            return oracle
        model, _, _ = load_checkpoint(ckpt)
        _check_vocab(model, task, ckpt)
        return translate(model, sources, args.lang, gen)

    rep = self_bleu(outputs(args.checkpoint_a, args.gen_a), outputs(args.checkpoint_b, args.gen_b))
    row = _report_row(f"{args.checkpoint_a}:{args.gen_a} vs {args.checkpoint_b}:{args.gen_b}",
                      f"{args.gen_a}/{args.gen_b}", args.split, rep)
    _write_report(Path(args.out), row, stem="self_bleu")
    print(json.dumps(row, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qbtlab", description="Desk-scale quick back-translation lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
        if data:
            sp.add_argument("--data-dir", help="task data directory")

    g = sub.add_parser("gen-data", help="generate the synthetic cipher corpora")
    common(g)
    g.add_argument("--output-dir")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty data directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a training schedule")
    common(t)
    t.add_argument("--output-dir")
    t.add_argument("--schedule", help="bt | qbt-staged | qbt-synced | ablation:<subset> (default: from config)")
    t.add_argument("--init-checkpoint", help="starting checkpoint (required for qbt-synced and ablations)")
    t.add_argument("--resume", action="store_true", help="continue from the output dir's latest checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint against oracle references")
    e.add_argument("checkpoint")
    common(e)
    e.add_argument("--generator", choices=("ar", "nar"), default="ar")
    e.add_argument("--split", choices=("test", "valid"), default="test")
    e.add_argument("--lang", choices=("both", "s", "t"), default="both", help="source language(s) to translate")
    e.add_argument("--limit", type=int, help="score only the first N sentences per direction")
    e.add_argument("--out", default=".", help="directory for bleu_report.csv/json")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="generation and training throughput benchmarks")
    b.add_argument("checkpoint")
    common(b)
    b.add_argument("--lengths", type=_int_list, default=[16, 32, 64, 128])
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--train-seconds", type=float, default=0.0, help="per step kind; 0 skips training throughput")
    b.add_argument("--out", default=".")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("self-bleu", help="BLEU of model B's outputs against model A's on shared sources")
    s.add_argument("checkpoint_a", help="checkpoint path or 'oracle'")
    s.add_argument("checkpoint_b", help="checkpoint path or 'oracle'")
    common(s)
    s.add_argument("--gen-a", choices=("ar", "nar"), default="nar")
    s.add_argument("--gen-b", choices=("ar", "nar"), default="ar")
    s.add_argument("--split", choices=("test", "valid"), default="test")
    s.add_argument("--lang", choices=("s", "t"), default="s", help="source language")
    s.add_argument("-n", type=int, default=500, help="number of source sentences")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_self_bleu)
    return p


def main(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .runner import UsageError
    from .synthdata import InvalidInputError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidInputError, FileNotFoundError) as e:
        print(f"qbtlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FloatingPointError, RuntimeError, ValueError, OSError) as e:
        print(f"qbtlab: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
