"""Pre-LayerNorm encoder-decoder Transformer with an encoder-side NAR head.

The encoder output is projected through the (tied) encoder embedding matrix to
give a per-position distribution over the vocabulary, so the encoder alone
translates in one parallel pass. The decoder is an ordinary autoregressive
Transformer decoder whose output head is tied to its own input embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthdata import BOS, EOS, PAD, Batch, other_lang

LANG_INDEX = {"s": 0, "t": 1}


@dataclass
class ModelConfig:
    vocab_size: int
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 128
    dropout: float = 0.1
    tie_encoder_head: bool = True
    tie_decoder_head: bool = True
    share_enc_dec_embeddings: bool = False
    # adds the target-language embedding to encoder inputs as an explicit NAR direction signal
    encoder_target_lang_embedding: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_heads, self.d_ff, self.max_positions) < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_enc_layers < 1 or self.n_dec_layers < 0:
            raise ValueError("need at least one encoder layer")

    def to_dict(self) -> dict:
        return asdict(self)


class InvalidInputError(ValueError):
    pass


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key_value, attn_mask=None, cache=None):
        """``attn_mask`` is boolean, broadcastable to (B, heads, Lq, Lk), True = attend.

        With ``cache`` (a dict), projected keys/values are appended to it
        (self-attention) or reused from it (cross-attention, ``cache["static"]``).
        """
        q = self._split(self.q_proj(query))
        if cache is not None and cache.get("static") and "k" in cache:
            k, v = cache["k"], cache["v"]
        else:
            k = self._split(self.k_proj(key_value))
            v = self._split(self.v_proj(key_value))
            if cache is not None:
                if not cache.get("static") and "k" in cache:
                    k = torch.cat([cache["k"], k], dim=2)
                    v = torch.cat([cache["v"], v], dim=2)
                cache["k"], cache["v"] = k, v
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask, torch.finfo(scores.dtype).min)
        weights = torch.softmax(scores, dim=-1)
        weights = F.dropout(weights, self.dropout, self.training)
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.dropout = dropout

    def forward(self, x):
        return self.fc2(F.dropout(F.gelu(self.fc1(x)), self.dropout, self.training))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn_norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff_norm = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x, mask):
        h = self.self_attn_norm(x)
        x = x + F.dropout(self.self_attn(h, h, mask), self.dropout, self.training)
        return x + F.dropout(self.ff(self.ff_norm(x)), self.dropout, self.training)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn_norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_attn_norm = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff_norm = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, y, memory, self_mask, cross_mask, cache=None):
        drop = lambda t: F.dropout(t, self.dropout, self.training)  # noqa: E731
        h = self.self_attn_norm(y)
        y = y + drop(self.self_attn(h, h, self_mask, cache=None if cache is None else cache["self"]))
        h = self.cross_attn_norm(y)
        y = y + drop(self.cross_attn(h, memory, cross_mask, cache=None if cache is None else cache["cross"]))
        return y + drop(self.ff(self.ff_norm(y)))


class Encoder(nn.Module):
    """Encoder stack plus its embeddings (``embed`` is We)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.lang = nn.Embedding(2, cfg.d_model)
        if cfg.encoder_target_lang_embedding:
            self.target_lang = nn.Embedding(2, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        if not cfg.tie_encoder_head:
            self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)


class Decoder(nn.Module):
    """Decoder stack plus its embeddings (``embed`` is Wd)."""

    def __init__(self, cfg: ModelConfig, shared_embed: nn.Embedding | None = None):
        super().__init__()
        self.embed = shared_embed if shared_embed is not None else nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.lang = nn.Embedding(2, cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        if not cfg.tie_decoder_head:
            self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)


@dataclass
class HiddenStates:
    values: torch.Tensor  # (B, L, d_model)
    pad_mask: torch.Tensor  # (B, L) bool, True on real tokens


def _as_tensor(batch: Batch, device) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor(batch.ids, dtype=torch.long, device=device)
    mask = torch.as_tensor(batch.pad_mask, device=device)
    return ids, mask


class Seq2SeqTransformer(nn.Module):
    """Holds every parameter: ``encoder.*`` is {θe, We}, ``decoder.*`` is {θd, Wd}."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, self.encoder.embed if cfg.share_enc_dec_embeddings else None)
        self.reset_parameters()
        # generation-step counters, read by the benchmark harness
        self.encoder_calls = 0
        self.decoder_calls = 0

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for name, p in self.named_parameters():
            if name.endswith("norm.weight"):
                nn.init.ones_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            else:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=generator)

    # -- heads: tying means the head IS the embedding weight

    @property
    def encoder_head_weight(self) -> torch.Tensor:
        return self.encoder.embed.weight if self.cfg.tie_encoder_head else self.encoder.head.weight

    @property
    def decoder_head_weight(self) -> torch.Tensor:
        return self.decoder.embed.weight if self.cfg.tie_decoder_head else self.decoder.head.weight

    def _check_ids(self, ids: torch.Tensor) -> None:
        if ids.shape[1] > self.cfg.max_positions:
            raise InvalidInputError(f"length {ids.shape[1]} exceeds max_positions={self.cfg.max_positions}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InvalidInputError("token id outside vocabulary")

    def encode(self, batch: Batch, source_lang: str | None = None, target_lang: str | None = None) -> HiddenStates:
        """Bidirectional encoding; PAD keys are masked out of attention."""
        ids, mask = _as_tensor(batch, self.encoder.embed.weight.device)
        return self.encode_ids(ids, mask, source_lang or batch.language, target_lang)

    def encode_ids(self, ids, mask, source_lang: str, target_lang: str | None = None) -> HiddenStates:
        self._check_ids(ids)
        self.encoder_calls += 1
        enc = self.encoder
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = enc.embed(ids) + enc.pos(positions)[None] + enc.lang.weight[LANG_INDEX[source_lang]]
        if self.cfg.encoder_target_lang_embedding:
            x = x + enc.target_lang.weight[LANG_INDEX[target_lang or other_lang(source_lang)]]
        x = F.dropout(x, self.cfg.dropout, self.training)
        attn_mask = mask[:, None, None, :]
        for layer in enc.layers:
            x = layer(x, attn_mask)
        return HiddenStates(enc.final_norm(x), mask)

    def encoder_logits(self, hidden: HiddenStates) -> torch.Tensor:
        return F.linear(hidden.values, self.encoder_head_weight)

    def decode_ids(self, target_in: torch.Tensor, enc_out: HiddenStates, target_lang: str) -> torch.Tensor:
        """Teacher-forced decoder pass; returns logits (B, L', vocab)."""
        self._check_ids(target_in)
        self.decoder_calls += 1
        dec = self.decoder
        L = target_in.shape[1]
        positions = torch.arange(L, device=target_in.device)
        y = dec.embed(target_in) + dec.pos(positions)[None] + dec.lang.weight[LANG_INDEX[target_lang]]
        y = F.dropout(y, self.cfg.dropout, self.training)
        causal = torch.ones(L, L, dtype=torch.bool, device=y.device).tril()[None, None]
        cross = enc_out.pad_mask[:, None, None, :]
        for layer in dec.layers:
            y = layer(y, enc_out.values, causal, cross)
        return F.linear(dec.final_norm(y), self.decoder_head_weight)

    def decode_teacher_forced(self, target_in: Batch, enc_out: HiddenStates, target_lang: str | None = None):
        ids, _ = _as_tensor(target_in, enc_out.values.device)
        return self.decode_ids(ids, enc_out, target_lang or target_in.language)

    # -- generation

    @torch.no_grad()
    def encoder_generate_nar(self, batch: Batch, target_lang: str | None = None) -> Batch:
        """One encoder pass, per-position argmax; output length equals input length."""
        hidden = self.encode(batch, target_lang=target_lang)
        pred = self.encoder_logits(hidden).argmax(-1)
        pred = pred.masked_fill(~hidden.pad_mask, PAD).cpu().numpy()
        pred.flags.writeable = False
        return Batch(ids=pred, lengths=batch.lengths, language=target_lang or other_lang(batch.language))

    @torch.no_grad()
    def decoder_generate_greedy(
        self,
        src: Batch,
        target_lang: str | None = None,
        max_len: int | np.ndarray | None = None,
        stop_at_eos: bool = True,
    ) -> Batch:
        """Greedy AR decoding with a key/value cache: one decoder call per position.

        ``max_len`` defaults per sentence to ``min(ceil(1.5 * n) + 2, max_positions)``.
        EOS is not included in the returned sequences. ``stop_at_eos=False``
        masks EOS out so every sequence runs to its limit (benchmarking).
        """
        target_lang = target_lang or other_lang(src.language)
        device = self.encoder.embed.weight.device
        enc_out = self.encode(src)
        B = src.size
        if max_len is None:
            limits = np.minimum(np.ceil(1.5 * src.lengths).astype(np.int64) + 2, self.cfg.max_positions)
        else:
            limits = np.minimum(np.broadcast_to(np.asarray(max_len, dtype=np.int64), (B,)), self.cfg.max_positions)
        limits_t = torch.as_tensor(limits, device=device)
        steps = int(limits.max()) if B else 0

        dec = self.decoder
        lang_vec = dec.lang.weight[LANG_INDEX[target_lang]]
        cross_mask = enc_out.pad_mask[:, None, None, :]
        caches = [{"self": {}, "cross": {"static": True}} for _ in dec.layers]
        out = torch.full((B, max(steps, 0)), PAD, dtype=torch.long, device=device)
        lengths = torch.zeros(B, dtype=torch.long, device=device)
        finished = limits_t <= 0
        token = torch.full((B,), BOS, dtype=torch.long, device=device)
        for t in range(steps):
            if bool(finished.all()):
                break
            self.decoder_calls += 1
            y = dec.embed(token)[:, None] + dec.pos.weight[t] + lang_vec
            for layer, cache in zip(dec.layers, caches):
                y = layer(y, enc_out.values, None, cross_mask, cache=cache)
            logits = F.linear(dec.final_norm(y[:, 0]), self.decoder_head_weight)
            if not stop_at_eos:
                logits[:, EOS] = torch.finfo(logits.dtype).min
            token = logits.argmax(-1)
            active = ~finished & (token != EOS)
            out[:, t] = torch.where(active, token, torch.full_like(token, PAD))
            lengths += active.long()
            finished = finished | (token == EOS) | (lengths >= limits_t)
        width = int(lengths.max()) if B else 0
        ids = out[:, :width].cpu().numpy()
        ids.flags.writeable = False
        lens = lengths.cpu().numpy()
        lens.flags.writeable = False
        return Batch(ids=ids, lengths=lens, language=target_lang)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Seq2SeqTransformer:
    gen = torch.Generator().manual_seed(seed)
    model = Seq2SeqTransformer(cfg)
    model.reset_parameters(gen)
    return model.to(dtype)


def decoder_io(target: Batch, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """(BOS + y, y + EOS) id tensors for teacher forcing, PAD-filled."""
    B, L = target.ids.shape
    ids = torch.tensor(target.ids, dtype=torch.long, device=device)
    lengths = torch.tensor(target.lengths, dtype=torch.long, device=device)
    dec_in = torch.full((B, L + 1), PAD, dtype=torch.long, device=device)
    dec_in[:, 0] = BOS
    dec_in[:, 1:] = ids
    dec_out = torch.full((B, L + 1), PAD, dtype=torch.long, device=device)
    dec_out[:, :L] = ids
    dec_out[torch.arange(B, device=device), lengths] = EOS
    return dec_in, dec_out


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean NLL over non-PAD target positions."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD)


def count_parameters(model: nn.Module) -> int:
    # shared storage (tied or shared embeddings) counts once
    return sum(p.numel() for p in model.parameters())
