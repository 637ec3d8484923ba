"""Synthetic cipher-language pairs for desk-scale unsupervised translation.

Two "languages" are rendered from one latent sentence process. Language ``s``
writes latent token ``k`` as ``s{k}``; language ``t`` writes it as
``t{perm[k]}`` and additionally reorders tokens inside fixed-width windows.
Because the mapping is an exact function, every test sentence has an oracle
translation and BLEU can be computed against it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
LANGS = ("s", "t")


class ConfigError(ValueError):
    """Raised for an inconsistent task specification."""


class InvalidInputError(ValueError):
    """Raised when a sequence does not belong to the expected language."""


def other_lang(lang: str) -> str:
    if lang not in LANGS:
        raise ValueError(f"unknown language tag {lang!r}")
    return "t" if lang == "s" else "s"


@dataclass(frozen=True)
class Vocab:
    """Word-level vocabulary: four specials followed by two disjoint language blocks."""

    content_per_lang: int

    @property
    def size(self) -> int:
        return len(SPECIAL_TOKENS) + 2 * self.content_per_lang

    @property
    def tokens(self) -> list[str]:
        n = self.content_per_lang
        return list(SPECIAL_TOKENS) + [f"s{i}" for i in range(n)] + [f"t{i}" for i in range(n)]

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK}

    def lang_range(self, lang: str) -> tuple[int, int]:
        """Half-open id interval of a language's content tokens."""
        start = len(SPECIAL_TOKENS) + (0 if lang == "s" else self.content_per_lang)
        if lang not in LANGS:
            raise ValueError(f"unknown language tag {lang!r}")
        return start, start + self.content_per_lang

    @property
    def lang_ranges(self) -> dict[str, tuple[int, int]]:
        return {lang: self.lang_range(lang) for lang in LANGS}

    def in_lang(self, ids: np.ndarray | Sequence[int], lang: str) -> np.ndarray:
        lo, hi = self.lang_range(lang)
        arr = np.asarray(ids)
        return (arr >= lo) & (arr < hi)

    def language_of(self, token_id: int) -> str | None:
        for lang in LANGS:
            lo, hi = self.lang_range(lang)
            if lo <= token_id < hi:
                return lang
        return None

    def decode(self, ids: Sequence[int]) -> str:
        toks = self.tokens
        return " ".join(toks[i] for i in ids)


@dataclass(frozen=True)
class CipherTaskSpec:
    """Recipe for a pair of synthetic languages and their corpora.

    ``permutation`` is either ``"random"`` (a seeded bijection) or
    ``"identity"`` (latent token ``k`` maps to ``t{k}``). ``latent_process``
    selects i.i.d. tokens (``"iid"``) or a sparse first-order Markov chain
    (``"markov"``); ``zipf_exponent`` skews the unigram (or start) distribution
    and ``0`` means uniform.
    """

    seed: int = 0
    content_vocab_per_lang: int = 200
    permutation: str = "random"
    reorder_window: int = 1
    min_len: int = 4
    max_len: int = 20
    corpus_size_per_lang: int = 20_000
    valid_size: int = 500
    test_size: int = 500
    zipf_exponent: float = 1.2
    latent_process: str = "iid"
    markov_branching: int = 8

    def validate(self) -> None:
        if self.content_vocab_per_lang < 2:
            raise ConfigError("content_vocab_per_lang must be at least 2")
        if self.permutation not in ("random", "identity"):
            raise ConfigError(f"permutation must be 'random' or 'identity', got {self.permutation!r}")
        if self.latent_process not in ("iid", "markov"):
            raise ConfigError(f"latent_process must be 'iid' or 'markov', got {self.latent_process!r}")
        if self.reorder_window < 1:
            raise ConfigError("reorder_window must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.zipf_exponent < 0:
            raise ConfigError("zipf_exponent must be nonnegative")
        if not 1 <= self.markov_branching <= self.content_vocab_per_lang:
            raise ConfigError("markov_branching must lie in [1, content_vocab_per_lang]")
        if min(self.corpus_size_per_lang, self.test_size) < 1 or self.valid_size < 0:
            raise ConfigError("corpus, valid and test sizes must be positive")
        needed = 2 * self.corpus_size_per_lang + 2 * self.valid_size + self.test_size
        # distinct latent sentences available at the shortest length bounds the pool
        capacity = sum(
            min(float(self.content_vocab_per_lang) ** n, 1e18)
            for n in range(self.min_len, self.max_len + 1)
        )
        if capacity < 2 * needed:
            raise ConfigError(
                f"vocabulary of {self.content_vocab_per_lang} tokens cannot supply {needed} "
                f"distinct sentences of length {self.min_len}-{self.max_len}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Cipher:
    """The resolved oracle map between the two languages."""

    vocab: Vocab
    perm: np.ndarray  # perm[k] = t-local index of latent/s-local token k
    window: int
    window_perms: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def inverse_perm(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv

    def _reorder(self, seq: np.ndarray, inverse: bool) -> np.ndarray:
        out = np.empty_like(seq)
        for start in range(0, len(seq), self.window):
            chunk = seq[start:start + self.window]
            sigma = self.window_perms[len(chunk)]
            if inverse:
                out[start + sigma] = chunk
            else:
                out[start:start + len(chunk)] = chunk[sigma]
        return out

    def translate(self, x: Sequence[int], direction: str) -> list[int]:
        """Apply the oracle cipher; ``direction`` is ``"s->t"`` or ``"t->s"``."""
        src, _, tgt = direction.partition("->")
        if src not in LANGS or tgt != other_lang(src):
            raise ValueError(f"direction must be 's->t' or 't->s', got {direction!r}")
        arr = np.asarray(x, dtype=np.int64)
        if arr.size == 0:
            return []
        if not self.vocab.in_lang(arr, src).all():
            raise InvalidInputError(f"sequence contains ids outside language {src!r}")
        src_lo, _ = self.vocab.lang_range(src)
        tgt_lo, _ = self.vocab.lang_range(tgt)
        local = arr - src_lo
        if src == "s":
            mapped = self._reorder(self.perm[local], inverse=False)
        else:
            mapped = self.inverse_perm[self._reorder(local, inverse=True)]
        return (mapped + tgt_lo).tolist()

    def render(self, latent: np.ndarray, lang: str) -> list[int]:
        """Write a latent sentence in language ``lang``."""
        s_ids = latent + self.vocab.lang_range("s")[0]
        if lang == "s":
            return s_ids.tolist()
        return self.translate(s_ids, "s->t")


@dataclass(frozen=True)
class Corpus:
    sentences: list[list[int]]
    language: str
    split: str = "train"

    def __len__(self) -> int:
        return len(self.sentences)

    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sentences], dtype=np.int64)


@dataclass(frozen=True)
class ParallelTestSet:
    """Held-out ``(x, oracle(x))`` pairs with ``x`` in language ``s``."""

    sources: list[list[int]]
    targets: list[list[int]]

    def __len__(self) -> int:
        return len(self.sources)

    def direction(self, src_lang: str) -> tuple[list[list[int]], list[list[int]]]:
        """(sources, references) for translating out of ``src_lang``."""
        if src_lang == "s":
            return self.sources, self.targets
        return self.targets, self.sources


@dataclass(frozen=True)
class Task:
    spec: CipherTaskSpec
    vocab: Vocab
    cipher: Cipher
    train: dict[str, Corpus]
    valid: ParallelTestSet
    test: ParallelTestSet
    latent_ids: dict[str, np.ndarray]  # split name -> latent sentence hashes


@dataclass(frozen=True)
class Batch:
    """Padded id matrix; ``pad_mask`` is True on real (non-PAD) cells."""

    ids: np.ndarray
    lengths: np.ndarray
    language: str

    @property
    def pad_mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())

    def sequences(self) -> list[list[int]]:
        return [row[:n].tolist() for row, n in zip(self.ids, self.lengths)]

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], language: str) -> "Batch":
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        width = int(lengths.max()) if len(seqs) else 0
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        ids.flags.writeable = False
        lengths.flags.writeable = False
        return cls(ids=ids, lengths=lengths, language=language)


def build_cipher(spec: CipherTaskSpec) -> Cipher:
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.content_vocab_per_lang
    perm = np.arange(n) if spec.permutation == "identity" else rng.permutation(n)
    # one fixed reordering per chunk size keeps the oracle a function
    window_perms = {1: np.zeros(1, dtype=np.int64)}
    for size in range(2, spec.reorder_window + 1):
        window_perms[size] = rng.permutation(size)
    return Cipher(vocab=Vocab(n), perm=perm, window=spec.reorder_window, window_perms=window_perms)


def _zipf_probs(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1) ** exponent
    # ranks are assigned to latent tokens at random so frequency carries no id information
    probs = np.empty(n)
    probs[rng.permutation(n)] = weights / weights.sum()
    return probs


class _LatentProcess:
    def __init__(self, spec: CipherTaskSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        n = spec.content_vocab_per_lang
        self.unigram = _zipf_probs(n, spec.zipf_exponent, rng)
        if spec.latent_process == "markov":
            k = spec.markov_branching
            self.successors = np.stack([rng.choice(n, size=k, replace=False) for _ in range(n)])
            w = 1.0 / np.arange(1, k + 1) ** max(spec.zipf_exponent, 1.0)
            self.succ_probs = w / w.sum()

    def sample(self, count: int) -> list[np.ndarray]:
        spec, rng = self.spec, self.rng
        lengths = rng.integers(spec.min_len, spec.max_len + 1, size=count)
        n = spec.content_vocab_per_lang
        if spec.latent_process == "iid":
            return [rng.choice(n, size=int(L), p=self.unigram) for L in lengths]
        out = []
        k = spec.markov_branching
        for L in lengths:
            seq = np.empty(int(L), dtype=np.int64)
            seq[0] = rng.choice(n, p=self.unigram)
            picks = rng.choice(k, size=int(L) - 1, p=self.succ_probs)
            for j in range(1, int(L)):
                seq[j] = self.successors[seq[j - 1], picks[j - 1]]
            out.append(seq)
        return out


def _latent_key(seq: np.ndarray) -> bytes:
    return hashlib.blake2b(np.asarray(seq, dtype=np.int64).tobytes(), digest_size=8).digest()


def generate_task(spec: CipherTaskSpec) -> Task:
    """Build vocabulary, unaligned training corpora and oracle-parallel eval sets.

    Every latent sentence is used at most once across all splits and both
    languages, so the two training corpora contain no translation pairs.
    """
    spec.validate()
    cipher = build_cipher(spec)
    rng = np.random.default_rng([spec.seed, 2])
    process = _LatentProcess(spec, rng)

    sizes = {
        "train_s": spec.corpus_size_per_lang,
        "train_t": spec.corpus_size_per_lang,
        "valid": spec.valid_size,
        "test": spec.test_size,
    }
    needed = sum(sizes.values())
    pool: list[np.ndarray] = []
    seen: set[bytes] = set()
    attempts = 0
    while len(pool) < needed:
        attempts += 1
        if attempts > 50:
            raise ConfigError("latent process too low-entropy to supply enough distinct sentences")
        for seq in process.sample(2 * (needed - len(pool)) + 16):
            key = _latent_key(seq)
            if key not in seen and len(seq) <= spec.max_len:
                seen.add(key)
                pool.append(seq)
                if len(pool) == needed:
                    break

    splits: dict[str, list[np.ndarray]] = {}
    start = 0
    for name, count in sizes.items():
        splits[name] = pool[start:start + count]
        start += count

    train = {
        lang: Corpus([cipher.render(z, lang) for z in splits[f"train_{lang}"]], lang, "train")
        for lang in LANGS
    }

    def parallel(latents: list[np.ndarray]) -> ParallelTestSet:
        return ParallelTestSet(
            sources=[cipher.render(z, "s") for z in latents],
            targets=[cipher.render(z, "t") for z in latents],
        )

    latent_ids = {
        name: np.frombuffer(b"".join(_latent_key(z) for z in seqs), dtype=np.uint64)
        for name, seqs in splits.items()
    }
    return Task(
        spec=spec,
        vocab=cipher.vocab,
        cipher=cipher,
        train=train,
        valid=parallel(splits["valid"]),
        test=parallel(splits["test"]),
        latent_ids=latent_ids,
    )


def oracle_translate(x: Sequence[int], direction: str, spec: CipherTaskSpec) -> list[int]:
    return build_cipher(spec).translate(x, direction)


def make_batches(
    corpus: Corpus | Sequence[Sequence[int]],
    batch_size: int = 32,
    seed: int = 0,
    epochs: int | None = 1,
    language: str | None = None,
) -> Iterator[Batch]:
    """Yield shuffled padded batches; ``epochs=None`` streams forever.

    Each epoch draws a fresh permutation from a generator seeded once with
    ``seed``, so two streams with the same seed produce identical batches.
    """
    sentences = corpus.sentences if isinstance(corpus, Corpus) else list(corpus)
    lang = corpus.language if isinstance(corpus, Corpus) else language
    if not sentences:
        raise ValueError("cannot batch an empty corpus")
    if lang is None:
        raise ValueError("language tag required for a bare sentence list")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(sentences))
        for start in range(0, len(order), batch_size):
            yield Batch.from_sequences([sentences[i] for i in order[start:start + batch_size]], lang)
        epoch += 1


# ---------------------------------------------------------------------------
# persistence: one sentence per line, space-separated ids


def write_sentences(path, sentences: Sequence[Sequence[int]]) -> None:
    with open(path, "w") as f:
        for s in sentences:
            f.write(" ".join(map(str, s)) + "\n")


def read_sentences(path) -> list[list[int]]:
    with open(path) as f:
        return [[int(tok) for tok in line.split()] for line in f]


def save_task(task: Task, out_dir) -> dict[str, str]:
    """Write corpora, vocab, permutation table and spec; returns file -> sha256."""
    from pathlib import Path

    import yaml

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for lang in LANGS:
        write_sentences(out / f"train.{lang}", task.train[lang].sentences)
    for name, pset in (("valid", task.valid), ("test", task.test)):
        write_sentences(out / f"{name}.s", pset.sources)
        write_sentences(out / f"{name}.t", pset.targets)
    (out / "vocab.txt").write_text("\n".join(task.vocab.tokens) + "\n")
    table = {
        "perm": task.cipher.perm.tolist(),
        "window": task.cipher.window,
        "window_perms": {str(k): v.tolist() for k, v in sorted(task.cipher.window_perms.items())},
    }
    (out / "permutation.json").write_text(json.dumps(table, indent=1) + "\n")
    (out / "task.yaml").write_text(yaml.safe_dump(task.spec.to_dict(), sort_keys=True))
    names = [f"{split}.{lang}" for split in ("train", "valid", "test") for lang in LANGS]
    names += ["vocab.txt", "permutation.json", "task.yaml"]
    hashes = {n: hashlib.sha256((out / n).read_bytes()).hexdigest() for n in sorted(names)}
    manifest = {"spec_hash": task.spec.spec_hash(), "files": hashes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return hashes


def load_task(data_dir) -> Task:
    """Reload a task written by :func:`save_task`.

    The cipher is rebuilt from the spec and checked against the stored table.
    """
    from pathlib import Path

    import yaml

    d = Path(data_dir)
    spec = CipherTaskSpec(**yaml.safe_load((d / "task.yaml").read_text()))
    cipher = build_cipher(spec)
    table = json.loads((d / "permutation.json").read_text())
    if table["perm"] != cipher.perm.tolist():
        raise ConfigError(f"{d}: permutation table does not match task spec")
    train = {lang: Corpus(read_sentences(d / f"train.{lang}"), lang, "train") for lang in LANGS}
    valid = ParallelTestSet(read_sentences(d / "valid.s"), read_sentences(d / "valid.t"))
    test = ParallelTestSet(read_sentences(d / "test.s"), read_sentences(d / "test.t"))
    return Task(spec, cipher.vocab, cipher, train, valid, test, latent_ids={})
