"""Top-1 sparsely-gated mixture of expert FFNs and its load-balancing loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import FfnParams, ffn_forward, init_weight
from .tensor import Rng, Tensor, UsageError


@dataclass
class RouterParams:
    wr: Tensor  # [d, E]
    noise_std: float = 0.0

    @classmethod
    def create(cls, rng, d: int, n_experts: int, noise_std: float = 0.0, dtype=np.float64) -> "RouterParams":
        if noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        return cls(init_weight(rng, (d, n_experts), d, dtype), noise_std)

    @property
    def n_experts(self) -> int:
        return self.wr.shape[1]


@dataclass
class RouterStats:
    """Additive routing statistics, so stats from several applications of one module can be pooled.

    ``counts`` is a constant; ``gate_sum`` stays on the tape so the balance
    loss can push gradient into the router.
    """
    counts: np.ndarray
    gate_sum: Tensor
    n_tokens: int
    selected: np.ndarray | None = None  # per-token expert choice; dropped when pooling

    @property
    def f(self) -> np.ndarray:
        return self.counts / self.n_tokens

    @property
    def g_bar(self) -> Tensor:
        return self.gate_sum * (1.0 / self.n_tokens)

    def __add__(self, other: "RouterStats") -> "RouterStats":
        return RouterStats(self.counts + other.counts, self.gate_sum + other.gate_sum,
                           self.n_tokens + other.n_tokens)


def pool_stats(stats: list[RouterStats]) -> RouterStats:
    out = stats[0]
    for s in stats[1:]:
        out = out + s
    return out


def route(z: Tensor, r: RouterParams, train: bool = False, rng: Rng | None = None):
    """Gate probabilities and the argmax expert per token (ties go to the lowest index)."""
    logits = tn.matmul(z, r.wr)
    if train and r.noise_std > 0:
        if rng is None:
            raise UsageError("train-mode routing with noise needs an rng")
        logits = logits + tn.gaussian(rng, logits.shape, r.noise_std, logits.dtype)
    g = tn.softmax(logits, axis=-1)
    return g, np.argmax(g.data, axis=-1)


def collect_router_stats(g: Tensor, selected: np.ndarray, mask: np.ndarray | None = None) -> RouterStats:
    E = g.shape[-1]
    g2 = g.reshape(-1, E)
    sel = np.asarray(selected).reshape(-1)
    valid = np.ones(sel.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n = int(valid.sum())
    if n == 0:
        raise UsageError("router statistics need at least one valid token")
    counts = np.bincount(sel[valid], minlength=E).astype(np.float64)
    gate_sum = g2[np.nonzero(valid)[0]].sum(axis=0)
    return RouterStats(counts, gate_sum, n, sel[valid])


def load_balance_loss(stats: RouterStats, n_experts: int | None = None) -> Tensor:
    """E * sum_i f_i * mean_gate_i, with the dispatch fractions f held constant."""
    if stats.n_tokens == 0:
        raise UsageError("balance loss of an empty batch")
    E = len(stats.counts) if n_experts is None else n_experts
    f = Tensor(stats.f.astype(stats.gate_sum.dtype))
    return (f * stats.g_bar).sum() * float(E)


def moe_ffn_forward(z: Tensor, experts: list[FfnParams], router: RouterParams | None,
                    train: bool = False, rng: Rng | None = None, mask: np.ndarray | None = None):
    """Route every valid token to one expert and scale that expert's output by its gate.

    Only the selected expert runs on a token; padded tokens are not routed and
    produce zero output. With a single expert and no router the gate is 1.
    Returns ``(out, stats)``.
    """
    shape = z.shape
    d = shape[-1]
    flat = z.reshape(-1, d)
    n_all = flat.shape[0]
    valid = np.ones(n_all, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    valid_idx = np.nonzero(valid)[0]
    if len(valid_idx) == 0:
        raise UsageError("mixture-of-experts forward with no valid token")
    zv = flat[valid_idx]

    if router is None:
        if len(experts) != 1:
            raise UsageError(f"{len(experts)} experts need a router")
        g = Tensor(np.ones((len(valid_idx), 1), dtype=z.dtype))
        sel = np.zeros(len(valid_idx), dtype=np.int64)
    else:
        with tn.op_scope("router"):
            g, sel = route(zv, router, train, rng)
    stats = collect_router_stats(g, sel)

    pieces, order = [], []
    for i, expert in enumerate(experts):
        rows = np.nonzero(sel == i)[0]
        if len(rows) == 0:
            continue
        with tn.op_scope("expert"):
            y = ffn_forward(zv[rows], expert) * g[rows, i:i + 1]
        pieces.append(y)
        order.append(rows)
    order = np.concatenate(order)
    out_valid = tn.concat(pieces, axis=0)[np.argsort(order, kind="stable")]

    if len(valid_idx) == n_all:
        return out_valid.reshape(shape), stats
    # padded rows read the extra all-zero row appended at the end
    pos = np.full(n_all, len(valid_idx))
    pos[valid_idx] = np.arange(len(valid_idx))
    padded = tn.concat([out_valid, Tensor(np.zeros((1, d), dtype=z.dtype))], axis=0)
    return padded[pos].reshape(shape), stats
