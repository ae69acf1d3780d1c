"""Conformer sublayers built on :mod:`sharemoe.tensor`.

All sequence layers take ``[B, T, d]`` tensors and a boolean frame mask of
shape ``[B, T]`` (True = valid frame). Parameters are plain dataclasses of
tensors so that sharing is just holding the same object in two places.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Rng, ShapeError, Tensor, parameter

NEG_INF = -1e9


def init_weight(rng: Rng | None, shape, fan_in: int, dtype=np.float64) -> Tensor:
    """Normal(0, 1/fan_in) weights; ``rng=None`` gives zeros (used for cheap shape-only builds)."""
    if rng is None:
        return parameter(np.zeros(shape, dtype=dtype))
    return parameter(rng.normal(shape, 1.0 / math.sqrt(fan_in), dtype))


def zeros(shape, dtype=np.float64) -> Tensor:
    return parameter(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return parameter(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# activations

def swish(x: Tensor) -> Tensor:
    return tn.swish(x)


def glu(x: Tensor) -> Tensor:
    n = x.shape[-1]
    if n % 2:
        raise ShapeError(f"GLU needs an even last dimension, got {x.shape}")
    h = n // 2
    return x[..., :h] * tn.sigmoid(x[..., h:])


def dropout(x: Tensor, rate: float, train: bool, rng: Rng | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


# ---------------------------------------------------------------------------
# normalisation

@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def create(cls, d: int, dtype=np.float64, eps: float = 1e-5) -> "NormParams":
        return cls(ones(d, dtype), zeros(d, dtype), eps)


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + p.eps) ** -0.5 * p.gamma + p.beta


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, d: int, dtype=np.float64, momentum: float = 0.9) -> "BatchNormParams":
        return cls(ones(d, dtype), zeros(d, dtype),
                   Tensor(np.zeros(d, dtype=dtype)), Tensor(np.ones(d, dtype=dtype)), momentum)


def batch_norm(x: Tensor, p: BatchNormParams, train: bool, mask: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation over all valid (batch, time) positions.

    Train mode uses (and folds into the running averages) the biased statistics
    of the valid frames only; eval mode uses the running averages.
    """
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    if not train:
        inv = 1.0 / np.sqrt(p.running_var.data + p.eps)
        return (x - Tensor(p.running_mean.data)) * Tensor(inv) * p.gamma + p.beta
    n = int(mask.sum())
    if n == 0:
        raise tn.UsageError("batch_norm in train mode needs at least one valid frame")
    m = Tensor(mask[..., None].astype(x.dtype))
    mu = (x * m).sum(axis=(0, 1)) * (1.0 / n)
    xc = x - mu
    var = (xc * xc * m).sum(axis=(0, 1)) * (1.0 / n)
    out = xc * (var + p.eps) ** -0.5 * p.gamma + p.beta
    a = p.momentum
    p.running_mean.data[...] = a * p.running_mean.data + (1 - a) * mu.data
    p.running_var.data[...] = a * p.running_var.data + (1 - a) * var.data
    return out


# ---------------------------------------------------------------------------
# feed-forward

@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng, d: int, d_ff: int, dtype=np.float64) -> "FfnParams":
        return cls(init_weight(rng, (d, d_ff), d, dtype), zeros(d_ff, dtype),
                   init_weight(rng, (d_ff, d), d_ff, dtype), zeros(d, dtype))


def ffn_forward(z: Tensor, p: FfnParams) -> Tensor:
    return tn.linear(swish(tn.linear(z, p.w1, p.b1)), p.w2, p.b2)


# ---------------------------------------------------------------------------
# attention

def sinusoid_table(positions: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal embeddings (sin on even, cos on odd channels) for arbitrary integer positions."""
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    out = np.zeros((len(positions), d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : d // 2]
    return out


@dataclass
class MhsaParams:
    """Relative-position self-attention weights (Transformer-XL style scoring)."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    wpos: Tensor
    bias_content: Tensor  # [heads, d_head]
    bias_pos: Tensor      # [heads, d_head]
    heads: int

    @classmethod
    def create(cls, rng, d: int, heads: int, dtype=np.float64) -> "MhsaParams":
        if d % heads:
            raise ShapeError(f"model dim {d} not divisible by {heads} heads")
        dk = d // heads
        w = lambda: init_weight(rng, (d, d), d, dtype)  # noqa: E731
        return cls(w(), zeros(d, dtype), w(), zeros(d, dtype), w(), zeros(d, dtype),
                   w(), zeros(d, dtype), w(), zeros((heads, dk), dtype), zeros((heads, dk), dtype), heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dk)


def _masked_softmax(scores: Tensor, key_mask: np.ndarray) -> Tensor:
    # key_mask broadcastable to scores
    if not np.all(key_mask.any(axis=-1)):
        raise tn.UsageError("attention row with no valid key position")
    return tn.softmax(tn.where(key_mask, scores, NEG_INF), axis=-1)


def rel_mhsa(z: Tensor, p: MhsaParams, mask: np.ndarray | None = None, return_weights: bool = False):
    """Self-attention whose scores depend on content and on the offset i - j only.

    score(i, j) = [(q_i + u) . k_j + (q_i + v) . r_{i-j}] / sqrt(d_head), with
    r the sinusoidal offset embedding projected by ``wpos``.
    """
    B, T, d = z.shape
    H = p.heads
    dk = d // H
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    q = _split_heads(tn.linear(z, p.wq, p.bq), H)
    k = _split_heads(tn.linear(z, p.wk, p.bk), H)
    v = _split_heads(tn.linear(z, p.wv, p.bv), H)

    offsets = np.arange(T - 1, -T, -1)  # row r holds offset T-1-r
    table = Tensor(sinusoid_table(offsets, d).astype(z.dtype))
    r = tn.matmul(table, p.wpos).reshape(2 * T - 1, H, dk).transpose(1, 2, 0)  # [H, dk, 2T-1]

    qu = q + p.bias_content.reshape(1, H, 1, dk)
    qv = q + p.bias_pos.reshape(1, H, 1, dk)
    content = tn.matmul(qu, tn.swapaxes(k, -1, -2))
    pos_full = tn.matmul(qv, r)  # [B, H, T, 2T-1]
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    idx = (T - 1) - (i - j)
    position = pos_full[:, :, np.broadcast_to(i, (T, T)), idx]
    scores = (content + position) * (1.0 / math.sqrt(dk))
    attn = _masked_softmax(scores, mask[:, None, None, :])
    out = tn.linear(_merge_heads(tn.matmul(attn, v)), p.wo, p.bo)
    return (out, attn) if return_weights else out


@dataclass
class MhaParams:
    """Plain (absolute-position) multi-head attention used by the decoder."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def create(cls, rng, d: int, heads: int, dtype=np.float64) -> "MhaParams":
        if d % heads:
            raise ShapeError(f"model dim {d} not divisible by {heads} heads")
        w = lambda: init_weight(rng, (d, d), d, dtype)  # noqa: E731
        return cls(w(), zeros(d, dtype), w(), zeros(d, dtype), w(), zeros(d, dtype), w(), zeros(d, dtype), heads)


def mha(x: Tensor, mem: Tensor, p: MhaParams, key_mask: np.ndarray, causal: bool = False) -> Tensor:
    H = p.heads
    dk = x.shape[-1] // H
    q = _split_heads(tn.linear(x, p.wq, p.bq), H)
    k = _split_heads(tn.linear(mem, p.wk, p.bk), H)
    v = _split_heads(tn.linear(mem, p.wv, p.bv), H)
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    m = key_mask[:, None, None, :]
    if causal:
        Tq, Tk = x.shape[1], mem.shape[1]
        m = m & np.tril(np.ones((Tq, Tk), dtype=bool))[None, None]
    attn = _masked_softmax(scores, m)
    return tn.linear(_merge_heads(tn.matmul(attn, v)), p.wo, p.bo)


# ---------------------------------------------------------------------------
# convolution module

@dataclass
class ConvModuleParams:
    """Shared weights of the depthwise-separable convolution module.

    The batch norm that sits inside the module is kept separately because it
    is individual per group.
    """
    pw_in_w: Tensor   # [d, 2 * inner]
    pw_in_b: Tensor
    dw_w: Tensor      # [inner, k]
    dw_b: Tensor
    pw_out_w: Tensor  # [inner, d]
    pw_out_b: Tensor

    @classmethod
    def create(cls, rng, d: int, kernel: int, expansion: int = 2, dtype=np.float64) -> "ConvModuleParams":
        if kernel % 2 == 0:
            raise ShapeError(f"conv kernel must be odd, got {kernel}")
        inner = d * expansion
        return cls(init_weight(rng, (d, 2 * inner), d, dtype), zeros(2 * inner, dtype),
                   init_weight(rng, (inner, kernel), kernel, dtype), zeros(inner, dtype),
                   init_weight(rng, (inner, d), inner, dtype), zeros(d, dtype))

    @property
    def inner(self) -> int:
        return self.dw_w.shape[0]


def conv_module(z: Tensor, p: ConvModuleParams, bn: BatchNormParams, train: bool,
                mask: np.ndarray | None = None) -> Tensor:
    if mask is None:
        mask = np.ones(z.shape[:2], dtype=bool)
    y = glu(tn.linear(z, p.pw_in_w, p.pw_in_b))
    y = tn.where(mask[..., None], y, 0.0)
    y = tn.depthwise_conv1d(y, p.dw_w, p.dw_b)
    y = swish(batch_norm(y, bn, train, mask))
    return tn.linear(y, p.pw_out_w, p.pw_out_b)


# ---------------------------------------------------------------------------
# subsampling frontend

def subsampled_length(n: int) -> int:
    """Length after two 3-wide stride-2 valid convolutions: floor((floor((n-1)/2) - 1) / 2)."""
    return ((n - 1) // 2 - 1) // 2


@dataclass
class FrontendParams:
    conv1_w: Tensor  # [9, ch]
    conv1_b: Tensor
    conv2_w: Tensor  # [9 * ch, ch]
    conv2_b: Tensor
    out_w: Tensor    # [F'' * ch, d]
    out_b: Tensor

    @classmethod
    def create(cls, rng, feat_dim: int, d: int, channels: int = 32, dtype=np.float64) -> "FrontendParams":
        f2 = subsampled_length(feat_dim)
        if f2 < 1:
            raise ShapeError(f"feature dim {feat_dim} too small for two stride-2 convolutions")
        return cls(init_weight(rng, (9, channels), 9, dtype), zeros(channels, dtype),
                   init_weight(rng, (9 * channels, channels), 9 * channels, dtype), zeros(channels, dtype),
                   init_weight(rng, (f2 * channels, d), f2 * channels, dtype), zeros(d, dtype))


def subsample_frontend(features: Tensor, p: FrontendParams) -> Tensor:
    """[B, T, F] features -> [B, T', d] with T' = subsampled_length(T)."""
    B, T, F = features.shape
    if subsampled_length(T) < 1:
        raise ShapeError(f"input of {T} frames is too short for 4x subsampling (need >= 7)")
    x = features.reshape(B, T, F, 1)
    x = swish(tn.linear(tn.unfold2d(x, 3, 2), p.conv1_w, p.conv1_b))
    x = swish(tn.linear(tn.unfold2d(x, 3, 2), p.conv2_w, p.conv2_b))
    B, T2, F2, ch = x.shape
    return tn.linear(x.reshape(B, T2, F2 * ch), p.out_w, p.out_b)
