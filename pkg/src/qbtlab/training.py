"""Training steps (warmup, DAE, EBT, EBTD, BT), Adam, and the QBT schedules.

Every step function takes a batch, performs exactly one optimizer update on
its declared trainable parameter group, and returns a :class:`StepRecord`.
Generation phases run under ``torch.no_grad`` in eval mode and never touch
parameters.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from .model import HiddenStates, Seq2SeqTransformer, cross_entropy_loss, decoder_io
from .synthdata import LANGS, PAD, Batch, Corpus, make_batches, other_lang

log = logging.getLogger(__name__)

STAGE_KINDS = ("WARMUP", "DAE", "EBT", "EBTD", "BT", "QBT_SYNCED")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf; the step was aborted before any update."""


# ---------------------------------------------------------------------------
# parameter groups and freezing


def encoder_param_names(model: Seq2SeqTransformer) -> set[str]:
    """{θe, We}: every encoder-side parameter including its embedding."""
    return {n for n, _ in model.named_parameters() if n.startswith("encoder.")}


def decoder_param_names(model: Seq2SeqTransformer) -> set[str]:
    """{θd, Wd}; a Wd shared with We stays with the encoder group."""
    return {n for n, _ in model.named_parameters() if n.startswith("decoder.")}


def all_param_names(model: Seq2SeqTransformer) -> set[str]:
    return {n for n, _ in model.named_parameters()}


@dataclass(frozen=True)
class FreezeMask:
    """Names of trainable parameters; everything else is frozen."""

    trainable: frozenset[str]

    @classmethod
    def of(cls, names: Iterable[str]) -> "FreezeMask":
        return cls(frozenset(names))

    def is_trainable(self, name: str) -> bool:
        return name in self.trainable


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    # per-parameter update counts; bias correction uses these so a group that
    # sat frozen for a whole stage starts with a correctly debiased first step
    param_steps: dict[str, int] = field(default_factory=dict)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, t in self.exp_avg.items():
            out[f"exp_avg/{name}"] = t
            out[f"exp_avg_sq/{name}"] = self.exp_avg_sq[name]
        return out


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    mask: FreezeMask | None = None,
) -> None:
    """In-place Adam update of every unmasked parameter that has a gradient.

    All gradients are checked before anything is written, so a non-finite
    gradient leaves both parameters and moments untouched.
    """
    names = [n for n in grads if mask is None or mask.is_trainable(n)]
    for n in names:
        if not torch.isfinite(grads[n]).all():
            raise NonFiniteError(f"non-finite gradient for {n}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for n in names:
            p, g = params[n], grads[n]
            if n not in state.exp_avg:
                state.exp_avg[n] = torch.zeros_like(p)
                state.exp_avg_sq[n] = torch.zeros_like(p)
            m, v = state.exp_avg[n], state.exp_avg_sq[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            t = state.param_steps.get(n, 0) + 1
            state.param_steps[n] = t
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))


class Trainer:
    """Binds a model to its optimizer state and performs masked updates."""

    def __init__(self, model: Seq2SeqTransformer, state: OptimizerState | None = None, grad_clip: float | None = None):
        self.model = model
        self.state = state or OptimizerState()
        self.grad_clip = grad_clip
        self.groups = {
            "encoder": FreezeMask.of(encoder_param_names(model)),
            "decoder": FreezeMask.of(decoder_param_names(model)),
            "all": FreezeMask.of(all_param_names(model)),
        }

    def update(self, loss: torch.Tensor, group: str) -> None:
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss.item()}; step aborted")
        mask = self.groups[group]
        params = {n: p for n, p in self.model.named_parameters() if n in mask.trainable}
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        grads = {
            n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(params.items(), grads)
        }
        if self.grad_clip:
            total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if torch.isfinite(total) and total > self.grad_clip:
                grads = {n: g * (self.grad_clip / total).to(g.dtype) for n, g in grads.items()}
        adam_step(params, grads, self.state, mask)


# ---------------------------------------------------------------------------
# step records and helpers


@dataclass
class StepRecord:
    kind: str
    direction: str  # e.g. "s->t": language of the generated pseudo-source -> language of z
    loss: float
    n_sequences: int
    n_tokens: int
    skipped: int = 0
    penalty: float = 0.0
    copy_rate: float = float("nan")


@dataclass(frozen=True)
class CopyPenaltyConfig:
    """Inverse copy-NLL regularizer: ``weight / (NLL(copy) + eps)``."""

    enabled: bool = True
    weight: float = 0.05
    eps: float = 0.1

    def __post_init__(self):
        if self.weight < 0 or self.eps <= 0:
            raise ValueError("copy penalty needs weight >= 0 and eps > 0")


def copy_penalty(copy_nll: torch.Tensor, cfg: CopyPenaltyConfig) -> torch.Tensor:
    return cfg.weight / (copy_nll + cfg.eps)


def _ids(batch: Batch, device) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor(batch.ids, dtype=torch.long, device=device)
    return ids, torch.as_tensor(batch.pad_mask, device=device)


def _device(model) -> torch.device:
    return model.encoder.embed.weight.device


class _eval_mode:
    """Temporarily switch a module to eval mode."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def nar_translate(model: Seq2SeqTransformer, z: Batch) -> Batch:
    with _eval_mode(model):
        return model.encoder_generate_nar(z)


def ar_translate(model: Seq2SeqTransformer, z: Batch, max_len=None) -> Batch:
    with _eval_mode(model):
        return model.decoder_generate_greedy(z, max_len=max_len)


def _positional_copy_rate(hyp: Batch, src: Batch) -> float:
    mask = hyp.pad_mask
    return float((np.asarray(hyp.ids) == np.asarray(src.ids))[mask].mean()) if mask.any() else 0.0


# ---------------------------------------------------------------------------
# the step family


def ebt_step(trainer: Trainer, z: Batch, penalty: CopyPenaltyConfig | None = None) -> StepRecord:
    """Encoder back-translation: z -> z' (NAR, no grad) -> z'' scored against z.

    Updates only {θe, We}.
    """
    model = trainer.model
    dev = _device(model)
    model.train()
    z_prime = nar_translate(model, z)
    src_ids, src_mask = _ids(z_prime, dev)
    tgt_ids, _ = _ids(z, dev)
    hidden = model.encode_ids(src_ids, src_mask, z_prime.language, z.language)
    loss = cross_entropy_loss(model.encoder_logits(hidden), tgt_ids.masked_fill(~src_mask, PAD))
    pen_value = 0.0
    total = loss
    if penalty is not None and penalty.enabled and penalty.weight > 0:
        # NLL that the forward translation of z assigns to copying z itself
        z_ids, z_mask = _ids(z, dev)
        fwd = model.encode_ids(z_ids, z_mask, z.language, z_prime.language)
        copy_nll = cross_entropy_loss(model.encoder_logits(fwd), z_ids)
        pen = copy_penalty(copy_nll, penalty)
        total = total + pen
        pen_value = float(pen.detach())
    trainer.update(total, "encoder")
    return StepRecord(
        "EBT", f"{z_prime.language}->{z.language}", float(loss.detach()), z.size, z.n_tokens,
        penalty=pen_value, copy_rate=_positional_copy_rate(z_prime, z),
    )


def ebtd_step(trainer: Trainer, z: Batch) -> StepRecord:
    """Encoder back-translated distillation: decoder learns z' -> z with the encoder frozen."""
    model = trainer.model
    dev = _device(model)
    model.train()
    z_prime = nar_translate(model, z)
    src_ids, src_mask = _ids(z_prime, dev)
    with torch.no_grad():
        hidden = model.encode_ids(src_ids, src_mask, z_prime.language, z.language)
    hidden = HiddenStates(hidden.values.detach(), hidden.pad_mask)
    dec_in, dec_out = decoder_io(z, dev)
    loss = cross_entropy_loss(model.decode_ids(dec_in, hidden, z.language), dec_out)
    trainer.update(loss, "decoder")
    return StepRecord(
        "EBTD", f"{z_prime.language}->{z.language}", float(loss.detach()), z.size, z.n_tokens,
        copy_rate=_positional_copy_rate(z_prime, z),
    )


def _seq2seq_loss(model: Seq2SeqTransformer, src: Batch, tgt: Batch) -> torch.Tensor:
    dev = _device(model)
    src_ids, src_mask = _ids(src, dev)
    hidden = model.encode_ids(src_ids, src_mask, src.language, tgt.language)
    dec_in, dec_out = decoder_io(tgt, dev)
    return cross_entropy_loss(model.decode_ids(dec_in, hidden, tgt.language), dec_out)


def bt_step(trainer: Trainer, z: Batch) -> StepRecord:
    """Back-translation with the AR decoder; all parameters are updated.

    Rows whose greedy translation is empty are dropped from the pseudo pairs
    and counted in ``skipped``.
    """
    model = trainer.model
    model.train()
    z_prime = ar_translate(model, z)
    keep = np.flatnonzero(z_prime.lengths > 0)
    skipped = z.size - len(keep)
    if len(keep) == 0:
        return StepRecord("BT", f"{z_prime.language}->{z.language}", float("nan"), 0, 0, skipped=skipped)
    if skipped:
        seqs_p, seqs_z = z_prime.sequences(), z.sequences()
        z_prime = Batch.from_sequences([seqs_p[i] for i in keep], z_prime.language)
        z = Batch.from_sequences([seqs_z[i] for i in keep], z.language)
    loss = _seq2seq_loss(model, z_prime, z)
    trainer.update(loss, "all")
    return StepRecord("BT", f"{z_prime.language}->{z.language}", float(loss.detach()), z.size, z.n_tokens, skipped=skipped)


@dataclass(frozen=True)
class NoiseConfig:
    drop_prob: float = 0.1
    shuffle_window: int = 3


def corrupt(seq: list[int], noise: NoiseConfig, rng: np.random.Generator) -> list[int]:
    """Token dropout then bounded local shuffle (no token moves ``shuffle_window`` or more slots)."""
    arr = np.asarray(seq)
    if noise.drop_prob > 0 and len(arr) > 1:
        keep = rng.random(len(arr)) >= noise.drop_prob
        if not keep.any():
            keep[rng.integers(len(arr))] = True
        arr = arr[keep]
    if noise.shuffle_window > 1:
        keys = np.arange(len(arr)) + rng.uniform(0, noise.shuffle_window, size=len(arr))
        arr = arr[np.argsort(keys, kind="stable")]
    return arr.tolist()


def dae_step(trainer: Trainer, z: Batch, noise: NoiseConfig, rng: np.random.Generator) -> StepRecord:
    """Denoising autoencoding through the full model; all parameters updated."""
    model = trainer.model
    model.train()
    noisy = Batch.from_sequences([corrupt(s, noise, rng) for s in z.sequences()], z.language)
    loss = _seq2seq_loss(model, noisy, z)
    trainer.update(loss, "all")
    return StepRecord("DAE", f"{z.language}->{z.language}", float(loss.detach()), z.size, z.n_tokens)


def truncate_pairs(xs: list[list[int]], ys: list[list[int]]) -> tuple[list[list[int]], list[list[int]]]:
    """Cut the longer side of each pair to the shorter one's length."""
    out_x, out_y = [], []
    for x, y in zip(xs, ys):
        n = min(len(x), len(y))
        out_x.append(x[:n])
        out_y.append(y[:n])
    return out_x, out_y


def warmup_step(trainer: Trainer, x: Batch, y: Batch) -> StepRecord:
    """Encoder-only training on independently sampled (x, y), truncated to equal length."""
    model = trainer.model
    dev = _device(model)
    model.train()
    xs, ys = truncate_pairs(x.sequences(), y.sequences())
    xb = Batch.from_sequences(xs, x.language)
    yb = Batch.from_sequences(ys, y.language)
    x_ids, x_mask = _ids(xb, dev)
    y_ids, _ = _ids(yb, dev)
    hidden = model.encode_ids(x_ids, x_mask, xb.language, yb.language)
    loss = cross_entropy_loss(model.encoder_logits(hidden), y_ids)
    trainer.update(loss, "encoder")
    return StepRecord("WARMUP", f"{xb.language}->{yb.language}", float(loss.detach()), xb.size, xb.n_tokens)


# ---------------------------------------------------------------------------
# batch sources


class BatchSource:
    """Infinite shuffled batch streams for both languages plus a language sampler.

    ``policy`` is ``"uniform"`` (fair coin per batch) or ``"alternate"``
    (s, t, s, t, ...).
    """

    def __init__(self, corpora: dict[str, Corpus], batch_size: int = 32, seed: int = 0, policy: str = "uniform"):
        if policy not in ("uniform", "alternate"):
            raise ValueError(f"unknown direction policy {policy!r}")
        self.streams = {
            lang: make_batches(corpora[lang], batch_size, seed=seed * 2 + i + 1, epochs=None)
            for i, lang in enumerate(LANGS)
        }
        self.rng = np.random.default_rng([seed, 99])
        self.policy = policy
        self._turn = 0
        self.drawn = 0

    def next_lang(self) -> str:
        if self.policy == "alternate":
            lang = LANGS[self._turn % 2]
            self._turn += 1
            return lang
        return LANGS[int(self.rng.integers(2))]

    def sample(self, lang: str | None = None) -> Batch:
        self.drawn += 1
        return next(self.streams[lang or self.next_lang()])


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Stage:
    kind: str
    steps: int | None = None
    seconds: float | None = None
    # fraction of the schedule's remaining time budget, resolved when reached
    share: float | None = None
    direction_policy: str = "alternate"
    # step subset for QBT_SYNCED, in execution order
    components: tuple[str, ...] = ("EBT", "EBTD", "BT")

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.steps is None and self.seconds is None and self.share is None:
            raise ValueError(f"stage {self.kind} needs a step, time or share budget")
        if any(b is not None and b < 0 for b in (self.steps, self.seconds, self.share)):
            raise ValueError("stage budgets must be nonnegative")
        bad = set(self.components) - {"EBT", "EBTD", "BT"}
        if bad or not self.components:
            raise ValueError(f"invalid synced components {self.components}")

    @property
    def empty(self) -> bool:
        return self.steps == 0 or self.seconds == 0 or self.share == 0


@dataclass(frozen=True)
class StageSchedule:
    """Ordered stages. ``total_seconds`` bounds the whole run's training time:
    whatever the step-budgeted stages leave over is split among ``share`` stages."""

    stages: tuple[Stage, ...]
    eval_every: int = 500
    total_seconds: float | None = None

    def __post_init__(self):
        if any(s.share is not None for s in self.stages) and self.total_seconds is None:
            raise ValueError("share-budgeted stages need a schedule total_seconds")
        if sum(s.kind == "QBT_SYNCED" for s in self.stages) > 1:
            raise ValueError("at most one QBT_SYNCED stage per schedule")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")


def qbt_staged_schedule(
    warmup_steps: int = 5000,
    total_seconds: float | None = None,
    total_steps: int | None = None,
    split: tuple[float, float, float] = (4, 16, 12),
    dae_steps: int = 0,
    eval_every: int = 500,
) -> StageSchedule:
    """Warmup, then EBT : EBTD : BT in the given ratio of a time or step budget.

    The default ratio is the 4h/16h/12h split of the limited-resource recipe.
    A time budget covers the whole run: the EBT/EBTD/BT split applies to what
    remains after DAE and warmup.
    """
    if (total_seconds is None) == (total_steps is None):
        raise ValueError("give exactly one of total_seconds or total_steps")
    weights = np.asarray(split, dtype=float) / sum(split)
    stages = []
    if dae_steps:
        stages.append(Stage("DAE", steps=dae_steps, direction_policy="uniform"))
    stages.append(Stage("WARMUP", steps=warmup_steps))
    for kind, w in zip(("EBT", "EBTD", "BT"), weights):
        if total_seconds is not None:
            stages.append(Stage(kind, share=float(w)))
        else:
            stages.append(Stage(kind, steps=int(round(total_steps * w))))
    return StageSchedule(tuple(stages), eval_every=eval_every, total_seconds=total_seconds)


@dataclass
class MetricRecord:
    stage: str
    step: int
    direction: str
    loss: float
    bleu: float = float("nan")
    copy_rate: float = float("nan")
    tokens_per_sec: float = float("nan")
    wall_clock_s: float = 0.0

    FIELDS = ("stage", "step", "direction", "loss", "bleu", "copy_rate", "tokens_per_sec", "wall_clock_s")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class RunContext:
    """Everything a schedule needs besides the schedule itself.

    ``evaluate(model, stage_kind)`` returns a dict with ``bleu`` and
    ``copy_rate``; ``on_progress(stage_index, stage, steps_done, elapsed)``
    fires every ``checkpoint_every`` steps and ``on_stage_end`` after each
    completed stage.
    """

    trainer: Trainer
    corpora: dict[str, Corpus]
    batch_size: int = 32
    seed: int = 0
    penalty: CopyPenaltyConfig = field(default_factory=CopyPenaltyConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    evaluate: Callable[[Seq2SeqTransformer, str], dict[str, float]] | None = None
    on_stage_end: Callable[[int, Stage, int], None] | None = None
    on_progress: Callable[[int, Stage, int, float], None] | None = None
    log_every: int = 100
    checkpoint_every: int = 1000
    patience: int | None = None
    start_time: float = field(default_factory=time.perf_counter)
    step_counter: int = 0
    step_log: list[str] = field(default_factory=list)
    record_steps: bool = False
    # training wall-clock spent before this process (resume) and the resolved share-stage pool
    time_offset: float = 0.0
    share_pool: float | None = None
    untimed: float = 0.0

    def __post_init__(self):
        self.rng = np.random.default_rng([self.seed, 7])

    @property
    def run_elapsed(self) -> float:
        """Training wall-clock so far; evaluation and checkpoint I/O are excluded."""
        return self.time_offset + time.perf_counter() - self.start_time - self.untimed


def _run_one(ctx: RunContext, kind: str, source: BatchSource) -> StepRecord:
    tr = ctx.trainer
    if kind == "WARMUP":
        lang = source.next_lang()
        x = source.sample(lang)
        y = source.sample(other_lang(lang))
        rec = warmup_step(tr, x, y)
    elif kind == "DAE":
        rec = dae_step(tr, source.sample(), ctx.noise, ctx.rng)
    elif kind == "EBT":
        rec = ebt_step(tr, source.sample(), ctx.penalty)
    elif kind == "EBTD":
        rec = ebtd_step(tr, source.sample())
    elif kind == "BT":
        rec = bt_step(tr, source.sample())
    else:
        raise ValueError(kind)
    ctx.step_counter += 1
    if ctx.record_steps:
        ctx.step_log.append(kind)
    if not math.isfinite(rec.loss) and rec.n_sequences:
        raise NonFiniteError(f"{kind} step produced loss {rec.loss}")
    return rec


class _Budget:
    def __init__(self, stage: Stage, done: int = 0, elapsed: float = 0.0):
        self.stage = stage
        self.t0 = time.perf_counter() - elapsed
        self.done = done

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def pause(self, seconds: float) -> None:
        self.t0 += seconds

    def exhausted(self) -> bool:
        s = self.stage
        if s.steps is not None and self.done >= s.steps:
            return True
        return s.seconds is not None and self.elapsed >= s.seconds


def _emit(ctx: RunContext, stage: str, rec: StepRecord, tokens: int, t_window: float, metrics: dict) -> MetricRecord:
    return MetricRecord(
        stage=stage,
        step=ctx.step_counter,
        direction=rec.direction,
        loss=rec.loss,
        bleu=metrics.get("bleu", float("nan")),
        copy_rate=metrics.get("copy_rate", rec.copy_rate),
        tokens_per_sec=tokens / t_window if t_window > 0 else float("nan"),
        wall_clock_s=ctx.run_elapsed,
    )


def _untimed(ctx: RunContext, budget: _Budget | None, fn, *args):
    """Call ``fn`` without charging its duration to the stage or run budget."""
    t0 = time.perf_counter()
    try:
        return fn(*args)
    finally:
        dt = time.perf_counter() - t0
        ctx.untimed += dt
        if budget is not None:
            budget.pause(dt)


def run_stage(
    ctx: RunContext,
    stage: Stage,
    eval_every: int = 500,
    stage_index: int = 0,
    done: int = 0,
    elapsed: float = 0.0,
) -> Iterator[MetricRecord]:
    """Run one stage until its budget is spent (or BLEU plateaus), yielding metric rows.

    ``done``/``elapsed`` resume a partially completed stage. Time spent in
    evaluation and checkpoint callbacks does not count against the budget.
    """
    if stage.empty:
        log.info("skipping empty stage %s", stage.kind)
        return
    # per-stage seeding makes a resume from a stage checkpoint replay the same run
    torch.manual_seed(ctx.seed * 10007 + 7919 * stage_index + done)
    ctx.rng = np.random.default_rng([ctx.seed, 7, stage_index, done])
    source = BatchSource(ctx.corpora, ctx.batch_size, seed=ctx.seed + 7919 * stage_index + done, policy=stage.direction_policy)
    budget = _Budget(stage, done, elapsed)
    kinds = stage.components if stage.kind == "QBT_SYNCED" else (stage.kind,)
    window_tokens, window_t0 = 0, time.perf_counter()
    rec = None
    best, stale = -math.inf, 0

    def evaluate() -> dict:
        return _untimed(ctx, budget, ctx.evaluate, ctx.trainer.model, stage.kind) if ctx.evaluate else {}

    while not budget.exhausted():
        for kind in kinds:
            rec = _run_one(ctx, kind, source)
            window_tokens += rec.n_tokens
        budget.done += 1
        if budget.exhausted():
            break  # the closing evaluation row below covers this step
        at_eval = budget.done % eval_every == 0
        if at_eval or budget.done % ctx.log_every == 0:
            t_window = time.perf_counter() - window_t0
            metrics = evaluate() if at_eval else {}
            yield _emit(ctx, stage.kind, rec, window_tokens, t_window, metrics)
            window_tokens, window_t0 = 0, time.perf_counter()
            if ctx.patience and "bleu" in metrics:
                if metrics["bleu"] > best:
                    best, stale = metrics["bleu"], 0
                else:
                    stale += 1
                    if stale >= ctx.patience:
                        log.info("%s: validation BLEU plateaued for %d evaluations", stage.kind, stale)
                        break
        if ctx.on_progress and budget.done % ctx.checkpoint_every == 0:
            _untimed(ctx, budget, ctx.on_progress, stage_index, stage, budget.done, budget.elapsed)
    if rec is not None:
        t_window = time.perf_counter() - window_t0
        yield _emit(ctx, stage.kind, rec, window_tokens, t_window, evaluate())
    if ctx.on_stage_end:
        _untimed(ctx, None, ctx.on_stage_end, stage_index, stage, ctx.step_counter)


def resolve_stage(ctx: RunContext, schedule: StageSchedule, stage: Stage) -> Stage:
    """Turn a ``share`` budget into seconds of the time left when the first share stage starts."""
    if stage.share is None:
        return stage
    if ctx.share_pool is None:
        ctx.share_pool = max(schedule.total_seconds - ctx.run_elapsed, 0.0)
    total = sum(s.share for s in schedule.stages if s.share is not None)
    return dataclasses.replace(stage, seconds=ctx.share_pool * stage.share / total if total else 0.0)


def run_qbt_staged(
    ctx: RunContext,
    schedule: StageSchedule,
    start_stage: int = 0,
    done: int = 0,
    elapsed: float = 0.0,
) -> Iterator[MetricRecord]:
    """Stages in order, each ending on its own budget; ``on_stage_end`` checkpoints them."""
    for i, stage in enumerate(schedule.stages):
        if i < start_stage:
            continue
        offset = (done, elapsed) if i == start_stage else (0, 0.0)
        yield from run_stage(ctx, resolve_stage(ctx, schedule, stage), schedule.eval_every, i, *offset)


def run_qbt_synced(
    ctx: RunContext,
    iterations: int | None = None,
    seconds: float | None = None,
    components: tuple[str, ...] = ("EBT", "EBTD", "BT"),
    eval_every: int = 500,
) -> Iterator[MetricRecord]:
    """Batch-level interleaving of the enabled steps, one fresh batch each, uniform language draw."""
    stage = Stage("QBT_SYNCED", steps=iterations, seconds=seconds, direction_policy="uniform", components=components)
    yield from run_qbt_staged(ctx, StageSchedule((stage,), eval_every=eval_every))


ABLATIONS = {
    "bt": ("BT",),
    "ebt": ("EBT",),
    "ebtd": ("EBTD",),
    "ebt+ebtd": ("EBT", "EBTD"),
    "ebtd+bt": ("EBTD", "BT"),
    "ebt+bt": ("EBT", "BT"),
    "ebt+ebtd+bt": ("EBT", "EBTD", "BT"),
}


def parse_ablation(spec: str) -> tuple[str, ...]:
    """``"bt+ebt"`` -> ("EBT", "BT"); order is always EBT, EBTD, BT."""
    parts = {p.strip().upper() for p in spec.split("+") if p.strip()}
    if not parts or parts - {"EBT", "EBTD", "BT"}:
        raise ValueError(f"ablation subset must combine ebt, ebtd, bt; got {spec!r}")
    return tuple(k for k in ("EBT", "EBTD", "BT") if k in parts)
