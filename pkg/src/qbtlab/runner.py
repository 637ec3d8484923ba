"""Run orchestration: data preparation, model init, schedules, checkpoints, metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .evaluation import BleuReport, copy_rate, corpus_bleu
from .model import ModelConfig, Seq2SeqTransformer, build_model
from .pretrain import CrosslingualInitConfig, apply_crosslingual_init, crosslingual_embeddings
from .synthdata import Batch, ParallelTestSet, Task, generate_task, load_task, save_task
from .training import (
    CopyPenaltyConfig, MetricRecord, NoiseConfig, OptimizerState, RunContext, Stage,
    StageSchedule, Trainer, nar_translate, ar_translate, parse_ablation, qbt_staged_schedule,
    run_qbt_staged,
)

log = logging.getLogger(__name__)

ENCODER_ONLY_STAGES = ("WARMUP", "EBT")


class UsageError(ValueError):
    """Bad invocation (maps to exit code 1)."""


# ---------------------------------------------------------------------------
# generation and scoring over whole corpora


def translate(model: Seq2SeqTransformer, sentences: Sequence[Sequence[int]], lang: str, generator: str,
              batch_size: int = 64) -> list[list[int]]:
    """Translate ``sentences`` (all in ``lang``) preserving order; generator is "ar" or "nar"."""
    if generator not in ("ar", "nar"):
        raise ValueError(f"generator must be 'ar' or 'nar', got {generator!r}")
    out: list[list[int]] = []
    for start in range(0, len(sentences), batch_size):
        batch = Batch.from_sequences(sentences[start:start + batch_size], lang)
        gen = nar_translate(model, batch) if generator == "nar" else ar_translate(model, batch)
        out.extend(gen.sequences())
    return out


def evaluate_bleu(model: Seq2SeqTransformer, pset: ParallelTestSet, generator: str,
                  limit: int | None = None, directions: Sequence[str] = ("s", "t")) -> BleuReport:
    """Oracle-referenced BLEU pooled over both translation directions."""
    hyps, refs = [], []
    for lang in directions:
        src, ref = pset.direction(lang)
        src, ref = src[:limit], ref[:limit]
        hyps += translate(model, src, lang, generator)
        refs += ref
    return corpus_bleu(hyps, refs)


def nar_copy_rate(model: Seq2SeqTransformer, pset: ParallelTestSet, limit: int | None = None) -> float:
    hyps, srcs = [], []
    for lang in ("s", "t"):
        src, _ = pset.direction(lang)
        hyps += translate(model, src[:limit], lang, "nar")
        srcs += src[:limit]
    return copy_rate(hyps, srcs)


# ---------------------------------------------------------------------------
# data and model setup


def prepare_task(cfg: RunConfig, force: bool = False) -> Task:
    """Load the task from the data dir, generating it first if absent."""
    d = cfg.resolved_data_dir
    manifest = d / "manifest.json"
    if manifest.exists():
        stored = json.loads(manifest.read_text())["spec_hash"]
        if stored == cfg.task.spec_hash() and not force:
            return load_task(d)
        if not force:
            raise UsageError(f"{d} holds data for a different task spec; pass --force to regenerate")
    task = generate_task(cfg.task)
    save_task(task, d)
    return task


def model_config(cfg: RunConfig, task: Task) -> ModelConfig:
    return ModelConfig(vocab_size=task.vocab.size, **vars(cfg.model))


def init_model(cfg: RunConfig, task: Task) -> Seq2SeqTransformer:
    model = build_model(model_config(cfg, task), seed=cfg.seed)
    if cfg.init.method == "crosslingual":
        icfg = CrosslingualInitConfig(dim=min(cfg.init.dim, cfg.model.d_model), window=cfg.init.window,
                                      refine_iters=cfg.init.refine_iters, row_norm=cfg.init.row_norm)
        emb = crosslingual_embeddings(task.train, task.vocab, icfg)
        apply_crosslingual_init(model, emb, task.vocab, row_norm=cfg.init.row_norm, seed=cfg.seed)
    return model


def build_schedule(cfg: RunConfig, name: str) -> StageSchedule:
    """Map a schedule name to stages.

    ``bt``: DAE (``dae_steps``) then BT for the rest of the budget. ``qbt-staged``:
    DAE, warmup, then EBT/EBTD/BT split. ``qbt-synced`` and
    ``ablation:<subset>``: one interleaved stage.
    """
    t, ev = cfg.training, cfg.evaluation
    if name == "qbt-staged":
        return qbt_staged_schedule(
            warmup_steps=t.warmup_steps, total_seconds=t.total_seconds,
            total_steps=None if t.total_seconds is not None else t.total_steps,
            split=tuple(t.split), dae_steps=t.dae_steps, eval_every=ev.eval_every,
        )
    if name == "bt":
        stages = []
        if t.dae_steps:
            stages.append(Stage("DAE", steps=t.dae_steps, direction_policy="uniform"))
        if t.total_seconds is not None:
            stages.append(Stage("BT", share=1.0, direction_policy="uniform"))
        else:
            stages.append(Stage("BT", steps=t.total_steps, direction_policy="uniform"))
        return StageSchedule(tuple(stages), eval_every=ev.eval_every, total_seconds=t.total_seconds)
    if name == "qbt-synced" or name.startswith("ablation:"):
        components = ("EBT", "EBTD", "BT") if name == "qbt-synced" else parse_ablation(name.split(":", 1)[1])
        stage = Stage("QBT_SYNCED", steps=None if t.synced_seconds is not None else t.synced_iterations,
                      seconds=t.synced_seconds, direction_policy="uniform", components=components)
        return StageSchedule((stage,), eval_every=ev.eval_every)
    raise UsageError(f"unknown schedule {name!r}; expected bt, qbt-staged, qbt-synced or ablation:<subset>")


# ---------------------------------------------------------------------------
# metrics output


class MetricWriter:
    """Append-only CSV writer safe to call from several threads."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self._lock = threading.Lock()
        new = not (append and self.path.exists())
        self._f = open(self.path, "a" if not new else "w", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(MetricRecord.FIELDS)
            self._f.flush()

    def write(self, rec: MetricRecord) -> None:
        with self._lock:
            self._w.writerow(rec.row())
            self._f.flush()

    def close(self) -> None:
        self._f.close()


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in MetricRecord.FIELDS:
            if k not in ("stage", "direction"):
                r[k] = float(r[k])
    return rows


# ---------------------------------------------------------------------------
# training runs


@dataclass
class RunResult:
    output_dir: Path
    final_checkpoint: Path
    stage_checkpoints: dict[str, Path] = field(default_factory=dict)
    records: list[MetricRecord] = field(default_factory=list)
    test_bleu: dict[str, float] = field(default_factory=dict)
    wall_clock_s: float = 0.0


def _checkpoint_dir(out: Path) -> Path:
    d = out / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_training(
    cfg: RunConfig,
    schedule_name: str | None = None,
    init_checkpoint=None,
    resume: bool = False,
    task: Task | None = None,
    final_eval: bool = True,
) -> RunResult:
    """Run one schedule end to end, writing config, checkpoints, metrics and a summary."""
    schedule_name = schedule_name or cfg.training.schedule
    synced = schedule_name == "qbt-synced" or schedule_name.startswith("ablation:")
    if synced and init_checkpoint is None and not resume:
        raise UsageError(f"{schedule_name} refines a converged model; --init-checkpoint is required")
    schedule = build_schedule(cfg, schedule_name)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    task = task or prepare_task(cfg)
    ckdir = _checkpoint_dir(out)
    torch.manual_seed(cfg.seed)

    start_stage, done, elapsed, step_counter = 0, 0, 0.0, 0
    time_offset, share_pool = 0.0, None
    opt_state = None
    if resume and (ckdir / "latest.qbt").exists():
        model, meta, opt_state = load_checkpoint(ckdir / "latest.qbt")
        prog = meta["progress"]
        if prog["schedule"] != schedule_name:
            raise UsageError(f"cannot resume: checkpoint is from schedule {prog['schedule']!r}")
        step_counter = prog["step_counter"]
        time_offset, share_pool = prog["run_elapsed"], prog["share_pool"]
        if prog["completed"]:
            start_stage = prog["stage_index"] + 1
        else:
            start_stage, done, elapsed = prog["stage_index"], prog["stage_done"], prog["stage_elapsed"]
        log.info("resuming at stage %d (%d steps done)", start_stage, done)
    elif init_checkpoint is not None:
        model, _, _ = load_checkpoint(init_checkpoint)
        if model.cfg.vocab_size != task.vocab.size:
            raise UsageError("init checkpoint vocabulary does not match the task")
    else:
        model = init_model(cfg, task)

    o = cfg.optimizer
    if opt_state is None:
        opt_state = OptimizerState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    trainer = Trainer(model, opt_state, grad_clip=o.grad_clip)
    result = RunResult(output_dir=out, final_checkpoint=ckdir / "latest.qbt")
    best_bleu = -math.inf

    def evaluate(m: Seq2SeqTransformer, stage_kind: str) -> dict:
        nonlocal best_bleu
        gen = cfg.evaluation.generator
        if gen == "auto":
            gen = "nar" if stage_kind in ENCODER_ONLY_STAGES else "ar"
        n = cfg.evaluation.eval_sentences
        bleu = evaluate_bleu(m, task.valid, gen, limit=n).bleu
        if gen == "ar" and bleu > best_bleu:
            best_bleu = bleu
            save_checkpoint(ckdir / "best.qbt", m, meta={"valid_bleu": bleu, "stage": stage_kind})
        return {"bleu": bleu, "copy_rate": nar_copy_rate(m, task.valid, limit=n)}

    def progress_meta(stage_index, stage, stage_done, stage_elapsed, completed):
        return {"progress": {"schedule": schedule_name, "stage_index": stage_index, "stage_kind": stage.kind,
                             "stage_done": stage_done, "stage_elapsed": stage_elapsed, "completed": completed,
                             "step_counter": ctx.step_counter, "run_elapsed": ctx.run_elapsed,
                             "share_pool": ctx.share_pool}}

    def on_progress(stage_index, stage, stage_done, stage_elapsed):
        save_checkpoint(ckdir / "latest.qbt", trainer.model, progress_meta(stage_index, stage, stage_done, stage_elapsed, False),
                        optimizer=trainer.state)

    def on_stage_end(stage_index, stage, step):
        path = ckdir / f"ckpt_{stage_index}_{stage.kind.lower()}_{step:07d}.qbt"
        save_checkpoint(path, trainer.model, progress_meta(stage_index, stage, 0, 0.0, True), optimizer=trainer.state)
        shutil.copyfile(path, ckdir / "latest.qbt")
        result.stage_checkpoints[f"{stage_index}_{stage.kind}"] = path

    ctx = RunContext(
        trainer=trainer, corpora=task.train, batch_size=cfg.training.batch_size, seed=cfg.seed,
        penalty=CopyPenaltyConfig(cfg.penalty.enabled, cfg.penalty.weight, cfg.penalty.eps),
        noise=NoiseConfig(cfg.noise.drop_prob, cfg.noise.shuffle_window),
        evaluate=evaluate, on_stage_end=on_stage_end, on_progress=on_progress,
        log_every=cfg.training.log_every, checkpoint_every=cfg.training.checkpoint_every,
        patience=cfg.evaluation.patience, step_counter=step_counter, time_offset=time_offset, share_pool=share_pool,
    )
    writer = MetricWriter(out / "metrics.csv", append=resume)
    try:
        for rec in run_qbt_staged(ctx, schedule, start_stage, done, elapsed):
            writer.write(rec)
            result.records.append(rec)
            log.info("%s step %d loss %.4f bleu %.2f", rec.stage, rec.step, rec.loss, rec.bleu)
    finally:
        writer.close()
    result.wall_clock_s = ctx.run_elapsed
    if not (ckdir / "latest.qbt").exists():
        save_checkpoint(ckdir / "latest.qbt", trainer.model, optimizer=trainer.state)

    summary = {"schedule": schedule_name, "wall_clock_s": result.wall_clock_s, "steps": ctx.step_counter,
               "stage_checkpoints": {k: str(v) for k, v in result.stage_checkpoints.items()}}
    if final_eval:
        result.test_bleu = {g: evaluate_bleu(trainer.model, task.test, g).bleu for g in ("ar", "nar")}
        summary["test_bleu"] = result.test_bleu
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return result


def self_bleu_between(model_a: Seq2SeqTransformer, gen_a: str, model_b: Seq2SeqTransformer, gen_b: str,
                      sources: Sequence[Sequence[int]], lang: str) -> BleuReport:
    """BLEU of B's outputs scored against A's outputs on the same sources."""
    from .evaluation import self_bleu

    ref = translate(model_a, sources, lang, gen_a)
    hyp = translate(model_b, sources, lang, gen_b)
    return self_bleu(ref, hyp)
