"""Unsupervised cross-lingual embedding initialization.

Stands in for a cross-lingually pretrained checkpoint: each language gets
count-based word vectors (PPMI over directional co-occurrence, reduced by
SVD), the two spaces are aligned without any parallel data (similarity-profile
seeding, then orthogonal Procrustes refinement with CSLS retrieval), and the
aligned vectors are written into the token embeddings. No translation ability
is installed; the encoder and decoder layers stay randomly initialized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .synthdata import Corpus, Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CrosslingualInitConfig:
    dim: int = 64
    window: int = 2
    refine_iters: int = 20
    csls_k: int = 10
    # row norm of written embeddings; normal(0, 0.02) rows of width 64 have norm ~0.16
    row_norm: float = 1.0
    max_sentences: int | None = None


def cooccurrence(corpus: Corpus, lo: int, n: int, window: int = 2, max_sentences: int | None = None) -> np.ndarray:
    """Distance-weighted counts ``C[a, b]`` of ``b`` following ``a`` within ``window``."""
    C = np.zeros((n, n))
    for sent in corpus.sentences[:max_sentences]:
        a = np.asarray(sent) - lo
        for d in range(1, window + 1):
            np.add.at(C, (a[:-d], a[d:]), 1.0 / d)
    return C


def ppmi_vectors(C: np.ndarray, dim: int) -> np.ndarray:
    """Word vectors from positive PMI of left and right contexts, reduced by SVD."""
    M = np.concatenate([C, C.T], axis=1)
    total = M.sum()
    row = M.sum(1, keepdims=True)
    col = M.sum(0, keepdims=True)
    with np.errstate(divide="ignore"):
        pmi = np.log(M * total / np.maximum(row * col, 1e-12))
    ppmi = np.where(M > 0, np.maximum(pmi, 0.0), 0.0)
    U, S, _ = np.linalg.svd(ppmi, full_matrices=False)
    k = min(dim, len(S))
    return U[:, :k] * np.sqrt(S[:k])


def _normalize(X: np.ndarray) -> np.ndarray:
    X = X - X.mean(0)
    return X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)


def _similarity_profile(X: np.ndarray) -> np.ndarray:
    # sorted intra-language similarities are invariant to any rotation of the space
    M = np.sort(X @ X.T, axis=1)[:, ::-1]
    M = M - M.mean(1, keepdims=True)
    return M / np.maximum(np.linalg.norm(M, axis=1, keepdims=True), 1e-12)


def csls(sim: np.ndarray, k: int) -> np.ndarray:
    k = min(k, sim.shape[0], sim.shape[1])
    r_src = np.sort(sim, axis=1)[:, -k:].mean(1)
    r_tgt = np.sort(sim, axis=0)[-k:, :].mean(0)
    return 2 * sim - r_src[:, None] - r_tgt[None, :]


def align_spaces(Xs: np.ndarray, Xt: np.ndarray, iters: int = 20, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal map ``W`` with ``Xs @ W ~ Xt`` and the induced s->t dictionary."""
    Xs, Xt = _normalize(Xs), _normalize(Xt)
    sim = _similarity_profile(Xs) @ _similarity_profile(Xt).T
    W = np.eye(Xs.shape[1])
    for _ in range(iters):
        fwd, bwd = sim.argmax(1), sim.argmax(0)
        src = np.concatenate([np.arange(len(Xs)), bwd])
        tgt = np.concatenate([fwd, np.arange(len(Xt))])
        U, _, Vt = np.linalg.svd(Xs[src].T @ Xt[tgt])
        W = U @ Vt
        sim = csls((Xs @ W) @ Xt.T, k)
    return W, sim.argmax(1)


@dataclass(frozen=True)
class CrosslingualEmbeddings:
    source: np.ndarray  # (n, dim) mapped into the target space
    target: np.ndarray
    dictionary: np.ndarray  # induced s-local -> t-local index


def crosslingual_embeddings(corpora: dict[str, Corpus], vocab: Vocab, cfg: CrosslingualInitConfig) -> CrosslingualEmbeddings:
    n = vocab.content_per_lang
    vecs = {}
    for lang in ("s", "t"):
        C = cooccurrence(corpora[lang], vocab.lang_range(lang)[0], n, cfg.window, cfg.max_sentences)
        vecs[lang] = _normalize(ppmi_vectors(C, cfg.dim))
    W, dictionary = align_spaces(vecs["s"], vecs["t"], cfg.refine_iters, cfg.csls_k)
    return CrosslingualEmbeddings(source=vecs["s"] @ W, target=vecs["t"], dictionary=dictionary)


def apply_crosslingual_init(model, emb: CrosslingualEmbeddings, vocab: Vocab, row_norm: float = 1.0, seed: int = 0) -> None:
    """Overwrite content-token rows of We and Wd with the aligned vectors.

    The shared space is embedded in ``d_model`` through a random orthonormal
    map; special-token rows keep their random initialization.
    """
    d = model.cfg.d_model
    dim = emb.source.shape[1]
    if dim > d:
        raise ValueError(f"cross-lingual dim {dim} exceeds d_model {d}")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    P = Q[:dim]  # (dim, d) with orthonormal rows
    rows = {}
    for lang, X in (("s", emb.source), ("t", emb.target)):
        Y = _normalize(X) @ P * row_norm
        rows[lang] = Y
    tables = [model.encoder.embed.weight]
    if model.decoder.embed is not model.encoder.embed:
        tables.append(model.decoder.embed.weight)
    with torch.no_grad():
        for table in tables:
            for lang, Y in rows.items():
                lo, hi = vocab.lang_range(lang)
                table[lo:hi] = torch.as_tensor(Y, dtype=table.dtype)
