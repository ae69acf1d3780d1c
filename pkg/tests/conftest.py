import dataclasses

import numpy as np
import pytest

from sharemoe.encoder import EncoderConfig, named_tensors
from sharemoe.seq2seq import Batch, DecoderConfig, ModelConfig
from sharemoe.tensor import Rng, Tensor


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the whole tensor.

    The floor makes tensors whose true gradient is identically zero (a bias
    cancelled by a following normalisation or softmax) compare absolutely.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numeric_grad(f, t: Tensor, coords=None, eps: float = 1e-6, check=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. chosen flat coordinates of ``t``.

    ``check`` is called after each perturbed evaluation; use it to assert that
    no discrete decision (expert routing) flipped.
    """
    flat = t.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + eps
        fp = f().item()
        if check:
            check()
        flat[i] = old - eps
        fm = f().item()
        if check:
            check()
        flat[i] = old
        out[n] = (fp - fm) / (2 * eps)
    return np.asarray(coords), out


def gradcheck(f, tensors, max_coords: int | None = None, seed: int = 0, eps: float = 1e-6,
              check=None) -> dict[str, float]:
    """Relative error per tensor between backprop and central differences.

    ``tensors`` is a list of (name, Tensor). With ``max_coords`` only a random
    subset of each tensor's entries is probed.
    """
    for _, t in tensors:
        t.grad = None
    f().backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in tensors}
    rng = np.random.default_rng(seed)
    errs = {}
    for n, t in tensors:
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, max_coords, replace=False))
        idx, num = numeric_grad(f, t, coords, eps, check)
        errs[n] = rel_error(analytic[n].reshape(-1)[idx], num)
    return errs


def trainable(obj, prefix=""):
    return [(n, t) for n, t in named_tensors(obj, prefix) if t.requires_grad]


def tiny_model_config(**enc) -> ModelConfig:
    e = dict(n_blocks=1, n_groups=2, n_experts=2, d_model=8, heads=2, kernel=3, d_ff=16, dropout=0.0,
             noise_std=0.0, feat_dim=8, frontend_channels=2)
    e.update(enc)
    return ModelConfig(EncoderConfig(**e), DecoderConfig(n_layers=1, d_model=e["d_model"], heads=2, d_ff=16,
                                                         vocab=5, dropout=0.0))


def random_batch(cfg: ModelConfig, lengths=(12, 10), tokens=((3, 4), (4,)), seed=0) -> Batch:
    rng = np.random.default_rng(seed)
    feats = [rng.standard_normal((n, cfg.encoder.feat_dim)) for n in lengths]
    return Batch.from_lists(feats, [list(t) for t in tokens])


def perturb_norms(params, seed=0, scale=0.1):
    """Give every norm gamma/beta a random offset so per-group copies are distinguishable."""
    rng = np.random.default_rng(seed)
    for name, t in named_tensors(params):
        if name.split(".")[-1] in ("gamma", "beta"):
            t.data += scale * rng.standard_normal(t.shape)


@pytest.fixture
def rng():
    return Rng(1234)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)
