"""
One parallel pass vs one pass per token
=======================================

The encoder translates non-autoregressively: a single forward pass labels
every source position. The decoder translates greedily, one forward pass per
output token. Counting the passes makes the difference exact; timing shows
what it costs.
"""

import torch

from qbtlab.bench import bench_generation
from qbtlab.model import ModelConfig, build_model
from qbtlab.synthdata import Vocab

torch.set_num_threads(1)
vocab = Vocab(200)
model = build_model(ModelConfig(vocab_size=vocab.size), seed=0)

records = bench_generation(model, vocab, lengths=(16, 32, 64), batch_size=32, reps=5)
print(f"{'gen':>4} {'len':>4} {'enc calls':>9} {'dec calls':>9} {'ms':>8} {'tok/s':>9}")
for r in records:
    print(f"{r.generator:>4} {r.length:>4} {r.encoder_calls:>9} {r.decoder_calls:>9} {r.mean_ms:>8.1f} {r.tokens_per_sec:>9.0f}")

# the AR/NAR ratio widens with length
for L in (16, 32, 64):
    ar = next(r for r in records if r.generator == "AR" and r.length == L)
    nar = next(r for r in records if r.generator == "NAR" and r.length == L)
    print(f"length {L}: NAR is {ar.mean_ms / nar.mean_ms:.1f}x faster")
