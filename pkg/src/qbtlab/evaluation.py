"""Corpus BLEU on token ids, self-BLEU, and positional copy rate."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

SMOOTH_EPS = 1e-9


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precisions"] = list(self.precisions)
        return d


def _ngram_counts(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]], max_n: int = 4) -> BleuReport:
    """Corpus-level BLEU-4 with one reference per hypothesis.

    Clipped n-gram matches and totals are summed over the corpus before
    taking precisions. A zero precision is replaced by ``1e-9``, which drives
    the score to (numerically) zero unless every order has some overlap; the
    result is rounded to zero below 1e-6.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("cannot score an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngram_counts(hyp, n), _ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1 - ref_len / hyp_len)
    log_p = sum(math.log(p if p > 0 else SMOOTH_EPS) for p in precisions) / max_n
    bleu = 100.0 * bp * math.exp(log_p)
    if bleu < 1e-6:
        bleu = 0.0
    return BleuReport(bleu=min(bleu, 100.0), precisions=precisions, brevity_penalty=bp, hyp_len=hyp_len, ref_len=ref_len)


def self_bleu(reference_corpus: Sequence[Sequence[int]], hypothesis_corpus: Sequence[Sequence[int]]) -> BleuReport:
    """BLEU of one model's outputs using another model's outputs as references.

    Both corpora must be translations of the same source sentences, in order.
    """
    if len(reference_corpus) != len(hypothesis_corpus):
        raise ValueError("self-BLEU corpora must be aligned translations of the same sources")
    return corpus_bleu(hypothesis_corpus, reference_corpus)


def copy_rate(hyps: Sequence[Sequence[int]], sources: Sequence[Sequence[int]]) -> float:
    """Fraction of hypothesis tokens equal to the source token at the same position."""
    if len(hyps) != len(sources):
        raise ValueError("copy_rate needs one source per hypothesis")
    same = total = 0
    for hyp, src in zip(hyps, sources):
        total += len(hyp)
        same += sum(1 for j, tok in enumerate(hyp) if j < len(src) and src[j] == tok)
    return same / total if total else 0.0


def token_accuracy(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """Positional agreement over reference tokens (a missing position counts as wrong)."""
    same = total = 0
    for hyp, ref in zip(hyps, refs):
        total += len(ref)
        same += sum(1 for j, tok in enumerate(ref) if j < len(hyp) and hyp[j] == tok)
    return same / total if total else 0.0
