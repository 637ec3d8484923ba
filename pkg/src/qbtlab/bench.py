"""Wall-clock benchmarks for NAR vs AR generation and per-step training throughput.

Both harnesses pin torch to one intra-op thread and refuse to run otherwise,
so timings compare generation strategies rather than thread scheduling.
Alongside wall-clock they record encoder/decoder invocation counts, which are
deterministic and make the constant-vs-linear step structure checkable
independently of machine noise.
"""

from __future__ import annotations

import copy
import csv
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .model import Seq2SeqTransformer
from .synthdata import Batch, Corpus, Vocab
from .training import BatchSource, CopyPenaltyConfig, Trainer, OptimizerState, bt_step, ebt_step, ebtd_step, warmup_step

DEFAULT_LENGTHS = (16, 32, 64, 128)


@contextmanager
def single_threaded(threads: int = 1):
    if threads != 1:
        raise RuntimeError(f"benchmarks run single-threaded; got threads={threads}")
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass
class ThroughputRecord:
    generator: str  # "AR" or "NAR"
    length: int
    batch_size: int
    mean_ms: float
    std_ms: float
    tokens_per_sec: float
    reps: int
    threads: int
    encoder_calls: int  # per generation call
    decoder_calls: int

    FIELDS = ("generator", "length", "batch_size", "mean_ms", "std_ms", "tokens_per_sec", "reps", "threads",
              "encoder_calls", "decoder_calls")


def synthetic_batch(vocab: Vocab, length: int, batch_size: int, seed: int = 0, lang: str = "s") -> Batch:
    lo, hi = vocab.lang_range(lang)
    rng = np.random.default_rng([seed, length])
    return Batch.from_sequences(rng.integers(lo, hi, size=(batch_size, length)).tolist(), lang)


def _time_generator(fn, reps: int, warmup: int) -> tuple[list[float], object]:
    out = None
    for _ in range(warmup):
        out = fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return times, out


def bench_generation(
    model: Seq2SeqTransformer,
    vocab: Vocab,
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    batch_size: int = 32,
    reps: int = 5,
    warmup: int = 2,
    seed: int = 0,
    threads: int = 1,
) -> list[ThroughputRecord]:
    """Time encoder NAR vs decoder greedy generation on identical batches per length.

    AR decoding is forced to emit exactly ``length`` tokens (EOS masked), so
    both generators produce the same number of tokens per batch.
    """
    if reps < 5:
        raise ValueError("need at least 5 timed repetitions")
    records = []
    model.eval()
    with single_threaded(threads), torch.no_grad():
        for L in lengths:
            batch = synthetic_batch(vocab, L, batch_size, seed)
            runners = {
                "NAR": lambda: model.encoder_generate_nar(batch),
                "AR": lambda: model.decoder_generate_greedy(batch, max_len=L, stop_at_eos=False),
            }
            for kind, fn in runners.items():
                times, _ = _time_generator(fn, reps, warmup)
                enc0, dec0 = model.encoder_calls, model.decoder_calls
                out = fn()
                enc_calls, dec_calls = model.encoder_calls - enc0, model.decoder_calls - dec0
                mean = float(np.mean(times))
                records.append(ThroughputRecord(
                    generator=kind, length=L, batch_size=batch_size, mean_ms=1e3 * mean,
                    std_ms=1e3 * float(np.std(times)), tokens_per_sec=out.n_tokens / mean,
                    reps=reps, threads=torch.get_num_threads(), encoder_calls=enc_calls, decoder_calls=dec_calls,
                ))
    return records


@dataclass
class TrainingThroughput:
    step_kind: str
    steps: int
    sequences: int
    tokens: int
    seconds: float

    @property
    def sequences_per_sec(self) -> float:
        return self.sequences / self.seconds if self.seconds > 0 else 0.0

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens / self.seconds if self.seconds > 0 else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "sequences_per_sec": self.sequences_per_sec, "tokens_per_sec": self.tokens_per_sec}


def bench_training_throughput(
    step_kind: str,
    model: Seq2SeqTransformer,
    corpora: dict[str, Corpus],
    duration: float,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 1e-4,
    threads: int = 1,
) -> TrainingThroughput:
    """Run ``step_kind`` steps on a private copy of ``model`` for ``duration`` seconds."""
    if step_kind not in ("WARMUP", "EBT", "EBTD", "BT"):
        raise ValueError(f"unsupported step kind {step_kind!r}")
    if duration <= 0:
        return TrainingThroughput(step_kind, 0, 0, 0, 0.0)
    trainer = Trainer(copy.deepcopy(model), OptimizerState(lr=lr))
    source = BatchSource(corpora, batch_size, seed=seed, policy="alternate")
    penalty = CopyPenaltyConfig()
    steps = seqs = toks = 0
    with single_threaded(threads):
        t0 = time.perf_counter()
        while time.perf_counter() - t0 < duration:
            z = source.sample()
            if step_kind == "EBT":
                ebt_step(trainer, z, penalty)
            elif step_kind == "EBTD":
                ebtd_step(trainer, z)
            elif step_kind == "BT":
                bt_step(trainer, z)
            else:
                warmup_step(trainer, z, source.sample("t" if z.language == "s" else "s"))
            steps += 1
            seqs += z.size
            toks += z.n_tokens
        elapsed = time.perf_counter() - t0
    return TrainingThroughput(step_kind, steps, seqs, toks, elapsed)


def write_throughput_csv(path, records: Sequence[ThroughputRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ThroughputRecord.FIELDS)
        for r in records:
            w.writerow([getattr(r, k) for k in ThroughputRecord.FIELDS])
