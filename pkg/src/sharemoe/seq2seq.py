"""Attention encoder-decoder around the shared MoE-conformer encoder.

Token ids 0, 1, 2 are reserved for padding, <sos> and <eos>.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoder import (EncoderConfig, EncoderOutput, EncoderParams, RngStreams, create_encoder,
                      encoder_forward, frame_mask)
from .layers import (FfnParams, MhaParams, NormParams, dropout, ffn_forward, init_weight,
                     layer_norm, mha, sinusoid_table, zeros)
from .moe import RouterStats, load_balance_loss
from .tensor import Rng, Tensor, UsageError

PAD, SOS, EOS = 0, 1, 2


@dataclass
class DecoderConfig:
    n_layers: int = 4
    d_model: int = 256
    heads: int = 4
    d_ff: int = 1024
    vocab: int = 4235
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab < 3:
            raise ValueError("vocab must hold at least <pad>, <sos> and <eos>")


@dataclass
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.005

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DecoderLayer:
    norm_self: NormParams
    self_attn: MhaParams
    norm_cross: NormParams
    cross_attn: MhaParams
    norm_ffn: NormParams
    ffn: FfnParams


@dataclass
class DecoderParams:
    embed: Tensor
    layers: list[DecoderLayer]
    norm_out: NormParams
    out_w: Tensor
    out_b: Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig


@dataclass
class ModelParams:
    encoder: EncoderParams
    decoder: DecoderParams


def create_decoder(cfg: DecoderConfig, rng: Rng | None, dtype=np.float64) -> DecoderParams:
    d = cfg.d_model
    layers = [DecoderLayer(NormParams.create(d, dtype), MhaParams.create(rng, d, cfg.heads, dtype),
                           NormParams.create(d, dtype), MhaParams.create(rng, d, cfg.heads, dtype),
                           NormParams.create(d, dtype), FfnParams.create(rng, d, cfg.d_ff, dtype))
              for _ in range(cfg.n_layers)]
    return DecoderParams(init_weight(rng, (cfg.vocab, d), d, dtype), layers, NormParams.create(d, dtype),
                         init_weight(rng, (d, cfg.vocab), d, dtype), zeros(cfg.vocab, dtype))


def create_model(cfg: ModelConfig, rng: Rng | None, dtype=np.float64) -> ModelParams:
    """Fresh weights from ``rng``; ``None`` gives zero weights to be overwritten by a checkpoint."""
    if cfg.encoder.d_model != cfg.decoder.d_model:
        raise ValueError("encoder and decoder must share d_model")
    enc_rng = rng.child("encoder") if rng is not None else None
    dec_rng = rng.child("decoder") if rng is not None else None
    return ModelParams(create_encoder(cfg.encoder, enc_rng, dtype), create_decoder(cfg.decoder, dec_rng, dtype))


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    x: np.ndarray          # [B, T, F] padded features
    x_lens: np.ndarray     # [B]
    y: np.ndarray          # [B, S+1] <sos> tokens <eos>, PAD-padded
    y_lens: np.ndarray     # [B] includes <sos> and <eos>
    ids: list[str]

    @classmethod
    def from_lists(cls, feats: list[np.ndarray], tokens: list[list[int]], ids=None, dtype=np.float64) -> "Batch":
        B = len(feats)
        T = max(f.shape[0] for f in feats)
        F = feats[0].shape[1]
        x = np.zeros((B, T, F), dtype=dtype)
        for b, f in enumerate(feats):
            x[b, :f.shape[0]] = f
        seqs = [[SOS, *t, EOS] for t in tokens]
        S1 = max(len(s) for s in seqs)
        y = np.full((B, S1), PAD, dtype=np.int64)
        for b, s in enumerate(seqs):
            y[b, :len(s)] = s
        return cls(x, np.array([f.shape[0] for f in feats]), y, np.array([len(s) for s in seqs]),
                   list(ids) if ids is not None else [str(i) for i in range(B)])

    @property
    def prefix(self) -> np.ndarray:
        return self.y[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.y[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        return frame_mask(self.y_lens - 1, self.y.shape[1] - 1)


# ---------------------------------------------------------------------------
# decoder

def decoder_forward(y_prefix: np.ndarray, h: Tensor, enc_mask: np.ndarray, params: DecoderParams,
                    cfg: DecoderConfig, train: bool = False, rng: Rng | None = None,
                    prefix_mask: np.ndarray | None = None) -> Tensor:
    """Logits [B, S, V] for next-token prediction from each prefix position."""
    y_prefix = np.asarray(y_prefix)
    B, S = y_prefix.shape
    d = cfg.d_model
    if prefix_mask is None:
        prefix_mask = np.ones((B, S), dtype=bool)
    rate = cfg.dropout if train else 0.0
    pos = Tensor(sinusoid_table(np.arange(S), d).astype(h.dtype))
    x = params.embed[y_prefix] * math.sqrt(d) + pos
    x = dropout(x, rate, train, rng)
    for layer in params.layers:
        xn = layer_norm(x, layer.norm_self)
        x = x + dropout(mha(xn, xn, layer.self_attn, prefix_mask, causal=True), rate, train, rng)
        x = x + dropout(mha(layer_norm(x, layer.norm_cross), h, layer.cross_attn, enc_mask), rate, train, rng)
        x = x + dropout(ffn_forward(layer_norm(x, layer.norm_ffn), layer.ffn), rate, train, rng)
    return tn.linear(layer_norm(x, params.norm_out), params.out_w, params.out_b)


# ---------------------------------------------------------------------------
# losses

def nll_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood per utterance, then averaged over the batch."""
    B, S, V = logits.shape
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones((B, S), dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise UsageError("nll_loss: an utterance has no valid target")
    logp = tn.log_softmax(logits, axis=-1)
    b, s = np.meshgrid(np.arange(B), np.arange(S), indexing="ij")
    picked = logp[b, s, targets]
    w = (mask / counts[:, None] / B).astype(logits.dtype)
    return -(picked * Tensor(w)).sum()


def kd_loss(h: Tensor, h_teacher, mask: np.ndarray | None = None) -> Tensor:
    """Mean over valid frames of the (unsquared) L2 distance to a frozen teacher output."""
    ht = h_teacher.data if isinstance(h_teacher, Tensor) else np.asarray(h_teacher)
    if h.shape != ht.shape:
        raise tn.ShapeError(f"kd_loss shape mismatch: student {h.shape} vs teacher {ht.shape}")
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
        ht = ht[None]
        mask = None if mask is None else np.asarray(mask)[None]
    B, T, _ = h.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    counts = mask.sum(axis=1)
    dist = tn.row_norm(h - Tensor(ht.astype(h.dtype)))
    w = (mask / np.maximum(counts, 1)[:, None] / B).astype(h.dtype)
    return (dist * Tensor(w)).sum()


def total_loss(nll: Tensor, balance_losses: list[Tensor], kd: Tensor | None, w: LossWeights) -> Tensor:
    """nll + alpha * mean(balance) + beta * kd; terms with zero weight are left off the tape."""
    loss = nll
    if w.alpha and balance_losses:
        loss = loss + tn.stack(balance_losses).sum() * (w.alpha / len(balance_losses))
    if w.beta and kd is not None:
        loss = loss + kd * w.beta
    return loss


@dataclass
class LossParts:
    loss: Tensor
    nll: float
    balance_term: float
    kd_term: float
    module_stats: list[RouterStats]
    enc: EncoderOutput


def compute_losses(params: ModelParams, cfg: ModelConfig, batch: Batch, weights: LossWeights,
                   train: bool = False, rngs: RngStreams | None = None,
                   teacher_h: np.ndarray | None = None) -> LossParts:
    """Full objective on one batch; balance stats are pooled over the G reuses of each block position."""
    x = Tensor(batch.x.astype(params.encoder.frontend.out_w.dtype, copy=False))
    enc = encoder_forward(x, batch.x_lens, cfg.encoder, params.encoder, train, rngs)
    logits = decoder_forward(batch.prefix, enc.h, enc.mask, params.decoder, cfg.decoder, train,
                             rngs.dropout if rngs is not None else None,
                             prefix_mask=frame_mask(batch.y_lens - 1, batch.prefix.shape[1]))
    nll = nll_loss(logits, batch.targets, batch.target_mask)
    module_stats = enc.module_stats()
    balance = [load_balance_loss(s) for s in module_stats]
    kd = kd_loss(enc.h, teacher_h, enc.mask) if teacher_h is not None and weights.beta else None
    loss = total_loss(nll, balance, kd, weights)
    bal_term = weights.alpha * float(np.mean([b.item() for b in balance])) if weights.alpha else 0.0
    kd_term = weights.beta * kd.item() if kd is not None else 0.0
    return LossParts(loss, nll.item(), bal_term, kd_term, module_stats, enc)


# ---------------------------------------------------------------------------
# decoding

def allowed_tokens(vocab: int) -> np.ndarray:
    return np.arange(EOS, vocab)


def encode_one(features: np.ndarray, params: ModelParams, cfg: ModelConfig) -> EncoderOutput:
    x = Tensor(np.asarray(features, dtype=params.encoder.frontend.out_w.dtype)[None])
    with tn.no_grad():
        return encoder_forward(x, [features.shape[0]], cfg.encoder, params.encoder, train=False)


def next_log_probs(prefixes: list[list[int]], enc: EncoderOutput, params: ModelParams,
                   cfg: ModelConfig) -> np.ndarray:
    """Log-probabilities of the next token for equal-length prefixes, shape [n, V]."""
    n = len(prefixes)
    h = Tensor(np.repeat(enc.h.data, n, axis=0))
    mask = np.repeat(enc.mask, n, axis=0)
    with tn.no_grad():
        logits = decoder_forward(np.array(prefixes), h, mask, params.decoder, cfg.decoder)
        return tn.log_softmax(logits[:, -1], axis=-1).data


def _score(total: float, length: int, length_norm: bool) -> float:
    return total / length if length_norm else total


def greedy_search(features: np.ndarray, params: ModelParams, cfg: ModelConfig, max_len: int):
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    enc = encode_one(features, params, cfg)
    allowed = allowed_tokens(cfg.decoder.vocab)
    seq, total = [SOS], 0.0
    for _ in range(max_len):
        lp = next_log_probs([seq], enc, params, cfg)[0]
        tok = int(allowed[np.argmax(lp[allowed])])
        seq.append(tok)
        total += float(lp[tok])
        if tok == EOS:
            break
    return seq[1:], total


def beam_search(features: np.ndarray, params: ModelParams, cfg: ModelConfig, beam: int,
                max_len: int, length_norm: bool = True):
    """Best hypothesis by (optionally length-normalised) log-probability.

    Every step expands each live hypothesis by all tokens except <pad>/<sos>
    and keeps the ``beam`` best by total log-probability; a hypothesis ending
    in <eos> is finalised. The greedy path is added to the finalised pool so
    that a wider beam never returns a worse finished hypothesis than greedy.
    Returns ``(tokens, score)`` with ``tokens`` including the final <eos> if any.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    enc = encode_one(features, params, cfg)
    allowed = allowed_tokens(cfg.decoder.vocab)
    alive: list[tuple[float, list[int]]] = [(0.0, [SOS])]
    finished: list[tuple[float, list[int], float]] = []
    for _ in range(max_len):
        lp = next_log_probs([seq for _, seq in alive], enc, params, cfg)
        cands = []
        for (total, seq), row in zip(alive, lp):
            for tok in allowed:
                cands.append((total + float(row[tok]), seq + [int(tok)]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for total, seq in cands[:beam]:
            if seq[-1] == EOS:
                finished.append((_score(total, len(seq) - 1, length_norm), seq, total))
            else:
                alive.append((total, seq))
        if not alive:
            break
    if beam > 1:
        toks, total = greedy_search(features, params, cfg, max_len)
        if toks[-1] == EOS:
            finished.append((_score(total, len(toks), length_norm), [SOS, *toks], total))
    if finished:
        score, seq, _ = max(finished, key=lambda f: (f[0], [-t for t in f[1]]))
        return seq[1:], score
    total, seq = alive[0]
    return seq[1:], _score(total, len(seq) - 1, length_norm)


def sequence_log_prob(features: np.ndarray, tokens: list[int], params: ModelParams, cfg: ModelConfig) -> float:
    """Total log-probability of ``tokens`` (generated after <sos>) under teacher forcing."""
    enc = encode_one(features, params, cfg)
    total = 0.0
    for s in range(len(tokens)):
        total += float(next_log_probs([[SOS, *tokens[:s]]], enc, params, cfg)[0][tokens[s]])
    return total


def exhaustive_search(features: np.ndarray, params: ModelParams, cfg: ModelConfig, max_len: int,
                      length_norm: bool = True):
    """Score every sequence reachable within ``max_len`` steps; best finished one wins."""
    allowed = [int(t) for t in allowed_tokens(cfg.decoder.vocab)]
    body = [t for t in allowed if t != EOS]
    finished, unfinished = [], []
    for n in range(max_len):
        for mid in itertools.product(body, repeat=n):
            seq = [*mid, EOS]
            finished.append((_score(sequence_log_prob(features, seq, params, cfg), len(seq), length_norm), seq))
    for seq in itertools.product(body, repeat=max_len):
        seq = list(seq)
        unfinished.append((_score(sequence_log_prob(features, seq, params, cfg), len(seq), length_norm), seq))
    pool = finished or unfinished
    score, seq = max(pool, key=lambda f: (f[0], [-t for t in f[1]]))
    return seq, score


def strip_special(tokens: list[int]) -> list[int]:
    return [t for t in tokens if t not in (PAD, SOS, EOS)]
