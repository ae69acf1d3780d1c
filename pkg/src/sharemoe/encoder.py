"""MoE-conformer blocks reused across groups.

The encoder holds ``n_blocks`` (C) sets of shared weights, one per block
position, and runs them ``n_groups`` (G) times in sequence. Block ``(c, g)``
reads the shared FFN / attention / convolution / expert weights of position
``c`` and its own normalisation layers and router, unless the share flags
collapse those onto group 0.
"""
from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tn
from .layers import (BatchNormParams, ConvModuleParams, FfnParams, FrontendParams, MhsaParams,
                     NormParams, conv_module, dropout, ffn_forward, layer_norm, rel_mhsa,
                     subsample_frontend, subsampled_length)
from .moe import RouterParams, RouterStats, moe_ffn_forward, pool_stats
from .tensor import Rng, Tensor


@dataclass
class EncoderConfig:
    n_blocks: int = 2            # C
    n_groups: int = 6            # G
    n_experts: int = 4           # E
    d_model: int = 256
    heads: int = 4
    kernel: int = 15
    d_ff: int = 1024
    dropout: float = 0.1
    noise_std: float = 0.1
    share_norms: bool = False
    share_routers: bool = False
    feat_dim: int = 80
    frontend_channels: int = 32
    conv_expansion: int = 2
    bn_momentum: float = 0.9

    def __post_init__(self):
        if min(self.n_blocks, self.n_groups, self.n_experts) < 1:
            raise ValueError("n_blocks, n_groups and n_experts must all be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.noise_std < 0 or not 0 <= self.dropout < 1:
            raise ValueError("noise_std must be >= 0 and dropout in [0, 1)")


@dataclass
class SharedBlock:
    ffn1: FfnParams
    mhsa: MhsaParams
    conv: ConvModuleParams
    experts: list[FfnParams]


@dataclass
class GroupLocal:
    """Per-(block, group) adapters: every normalisation layer and the router."""
    norm_ffn1: NormParams
    norm_mhsa: NormParams
    norm_conv: NormParams
    norm_moe: NormParams
    norm_out: NormParams
    conv_bn: BatchNormParams
    router: RouterParams | None


@dataclass
class EncoderParams:
    frontend: FrontendParams
    shared: list[SharedBlock]
    local: list[list[GroupLocal]]  # [group][block]


@dataclass
class RngStreams:
    """Long-lived generators for the stochastic parts of a train-mode forward."""
    dropout: Rng
    noise: Rng

    @classmethod
    def from_rng(cls, rng: Rng) -> "RngStreams":
        return cls(rng.child("dropout"), rng.child("noise"))


# ---------------------------------------------------------------------------
# construction and traversal

def _norms(cfg: EncoderConfig, dtype) -> dict:
    d = cfg.d_model
    return dict(norm_ffn1=NormParams.create(d, dtype), norm_mhsa=NormParams.create(d, dtype),
                norm_conv=NormParams.create(d, dtype), norm_moe=NormParams.create(d, dtype),
                norm_out=NormParams.create(d, dtype),
                conv_bn=BatchNormParams.create(d * cfg.conv_expansion, dtype, cfg.bn_momentum))


def create_encoder(cfg: EncoderConfig, rng: Rng | None, dtype=np.float64) -> EncoderParams:
    """Initialise encoder weights; ``rng=None`` builds zero weights (shape-only use)."""
    d = cfg.d_model
    frontend = FrontendParams.create(rng, cfg.feat_dim, d, cfg.frontend_channels, dtype)
    shared = [SharedBlock(FfnParams.create(rng, d, cfg.d_ff, dtype),
                          MhsaParams.create(rng, d, cfg.heads, dtype),
                          ConvModuleParams.create(rng, d, cfg.kernel, cfg.conv_expansion, dtype),
                          [FfnParams.create(rng, d, cfg.d_ff, dtype) for _ in range(cfg.n_experts)])
              for _ in range(cfg.n_blocks)]

    def router():
        if cfg.n_experts == 1:
            return None
        return RouterParams.create(rng, d, cfg.n_experts, cfg.noise_std, dtype)

    local: list[list[GroupLocal]] = []
    for g in range(cfg.n_groups):
        row = []
        for c in range(cfg.n_blocks):
            norms = _norms(cfg, dtype)
            r = router()
            if g > 0:
                first = local[0][c]
                if cfg.share_norms:
                    norms = {k: getattr(first, k) for k in norms}
                if cfg.share_routers:
                    r = first.router
            row.append(GroupLocal(router=r, **norms))
        local.append(row)
    return EncoderParams(frontend, shared, local)


def named_tensors(obj, prefix: str = "", seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses/lists and yield each distinct tensor once, under its first path."""
    if seen is None:
        seen = set()
    if isinstance(obj, Tensor):
        if id(obj) not in seen:
            seen.add(id(obj))
            yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, seen)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i), seen)


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_tensors(obj) if t.requires_grad]


def map_tensors(obj, fn, memo: dict | None = None):
    """Rebuild a parameter structure with ``fn`` applied to each tensor.

    Objects referenced twice in ``obj`` stay shared in the result.
    """
    if memo is None:
        memo = {}
    if id(obj) in memo:
        return memo[id(obj)]
    if isinstance(obj, Tensor):
        out = fn(obj)
    elif dataclasses.is_dataclass(obj):
        out = dataclasses.replace(obj, **{f.name: map_tensors(getattr(obj, f.name), fn, memo)
                                          for f in dataclasses.fields(obj)})
    elif isinstance(obj, list):
        out = [map_tensors(x, fn, memo) for x in obj]
    else:
        return obj
    memo[id(obj)] = out
    return out


def clone(obj):
    return map_tensors(obj, lambda t: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name))


def unroll(params: EncoderParams, cfg: EncoderConfig) -> tuple[EncoderConfig, EncoderParams]:
    """Physically copy every shared weight into a G=1 model of C*G blocks (same computation)."""
    shared, local = [], []
    for g in range(cfg.n_groups):
        for c in range(cfg.n_blocks):
            shared.append(clone(params.shared[c]))
            local.append(clone(params.local[g][c]))
    ucfg = dataclasses.replace(cfg, n_blocks=cfg.n_blocks * cfg.n_groups, n_groups=1)
    return ucfg, EncoderParams(clone(params.frontend), shared, [local])


# ---------------------------------------------------------------------------
# forward

TRANSFORMATIONS = ("ffn1", "mhsa", "conv", "moe_ffn")


def _branch_distance(branch: Tensor, mask: np.ndarray) -> float:
    norms = np.sqrt(np.sum(branch.data.astype(np.float64) ** 2, axis=-1))
    return float(norms[mask].mean())


def conformer_block_forward(z: Tensor, shared: SharedBlock, local: GroupLocal, cfg: EncoderConfig,
                            train: bool = False, rngs: RngStreams | None = None,
                            mask: np.ndarray | None = None, trace: list | None = None):
    """One MoE-conformer block with pre-norm residual branches and a final layer norm.

    Returns ``(z_hat, stats)``. When ``trace`` is a list, the mean per-frame
    L2 norm of each residual branch's contribution is appended to it.
    """
    if mask is None:
        mask = np.ones(z.shape[:2], dtype=bool)
    rate = cfg.dropout if train else 0.0
    drop_rng = rngs.dropout if rngs is not None else None
    noise_rng = rngs.noise if rngs is not None else None

    def residual(x, branch, label):
        branch = dropout(branch, rate, train, drop_rng)
        if trace is not None:
            trace.append((label, _branch_distance(branch, mask)))
        return x + branch

    z1 = residual(z, ffn_forward(layer_norm(z, local.norm_ffn1), shared.ffn1) * 0.5, "ffn1")
    z2 = residual(z1, rel_mhsa(layer_norm(z1, local.norm_mhsa), shared.mhsa, mask), "mhsa")
    z3 = residual(z2, conv_module(layer_norm(z2, local.norm_conv), shared.conv, local.conv_bn, train, mask), "conv")
    moe_out, stats = moe_ffn_forward(layer_norm(z3, local.norm_moe), shared.experts, local.router,
                                     train, noise_rng, mask)
    z4 = residual(z3, moe_out * 0.5, "moe_ffn")
    return layer_norm(z4, local.norm_out), stats


@dataclass
class EncoderOutput:
    h: Tensor                       # [B, T', d]
    mask: np.ndarray                # [B, T'] valid frames
    stats: list[list[RouterStats]]  # [group][block]
    trace: list = field(default_factory=list)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def module_stats(self) -> list[RouterStats]:
        """Stats of each block position pooled over its G reuses."""
        return [pool_stats([row[c] for row in self.stats]) for c in range(len(self.stats[0]))]


def frame_mask(lengths, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def encoder_forward(features: Tensor, lengths, cfg: EncoderConfig, params: EncoderParams,
                    train: bool = False, rngs: RngStreams | None = None,
                    trace: bool = False) -> EncoderOutput:
    """Frontend then blocks (c, g) for g = 0..G-1, c = 0..C-1."""
    h = subsample_frontend(features, params.frontend)
    sub_lengths = np.array([subsampled_length(int(n)) for n in np.asarray(lengths)])
    if np.any(sub_lengths < 1):
        raise tn.ShapeError(f"utterance lengths {list(lengths)} too short for 4x subsampling")
    mask = frame_mask(sub_lengths, h.shape[1])
    stats, rows = [], []
    for g in range(cfg.n_groups):
        row = []
        for c in range(cfg.n_blocks):
            tr = [] if trace else None
            h, s = conformer_block_forward(h, params.shared[c], params.local[g][c], cfg, train, rngs, mask, tr)
            row.append(s)
            if trace:
                rows.extend((g, c, label, dist) for label, dist in tr)
        stats.append(row)
    return EncoderOutput(h, mask, stats, rows)


# ---------------------------------------------------------------------------
# accounting

CATEGORIES = ("frontend", "ffn", "mhsa", "conv", "experts", "routers", "norms")


@dataclass
class ParamReport:
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        for k in CATEGORIES:
            lines.append(f"{k:<10}{self.counts[k]:>14,d}")
        lines.append(f"{'N_pe':<10}{self.total:>14,d}  ({self.total / 1e6:.2f}M)")
        return "\n".join(lines)

    def kv(self) -> str:
        return "\n".join([f"{k}={self.counts[k]}" for k in CATEGORIES] + [f"total={self.total}"])


def _category(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "frontend":
        return "frontend"
    if parts[0] == "shared":
        return {"ffn1": "ffn", "mhsa": "mhsa", "conv": "conv", "experts": "experts"}[parts[2]]
    return "routers" if parts[3] == "router" else "norms"


def count_params(cfg: EncoderConfig) -> ParamReport:
    """Exact trainable-parameter counts, each shared tensor counted once."""
    params = create_encoder(cfg, None, dtype=np.float32)
    counts = dict.fromkeys(CATEGORIES, 0)
    for name, t in named_tensors(params):
        if t.requires_grad:
            counts[_category(name)] += t.size
    return ParamReport(counts)


# ---------------------------------------------------------------------------
# L2 profile

@dataclass
class ProfileRow:
    index: int
    group: int
    block: int
    transformation: str
    distance: float


def l2_distance_profile(features: Tensor, cfg: EncoderConfig, params: EncoderParams,
                        lengths=None, blocks_per_group: int | None = None) -> list[ProfileRow]:
    """Eval-mode per-transformation distances, in execution order (4 per block).

    ``blocks_per_group`` relabels an unrolled model's blocks as (group, block)
    pairs of the shared topology it was built from.
    """
    if lengths is None:
        lengths = [features.shape[1]] * features.shape[0]
    with tn.no_grad():
        out = encoder_forward(features, lengths, cfg, params, train=False, trace=True)
    rows = []
    for i, (g, c, label, dist) in enumerate(out.trace):
        if blocks_per_group:
            flat = g * cfg.n_blocks + c
            g, c = divmod(flat, blocks_per_group)
        rows.append(ProfileRow(i, g, c, label, dist))
    return rows


def profile_csv(rows: list[ProfileRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "group", "block", "transformation", "distance"])
    for r in rows:
        w.writerow([r.index, r.group, r.block, r.transformation, repr(r.distance)])
    return buf.getvalue()

