"""Training, distillation and evaluation on the synthetic task."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, architecture_hash, dump_config, parse_config
from .data import Utterance, load_dataset, make_batches
from .encoder import RngStreams, clone, encoder_forward, named_tensors
from .seq2seq import Batch, ModelParams, beam_search, compute_losses, create_model, strip_special
from .tensor import NonFiniteError, Rng, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(step: int, warmup: int, scale: float, d: int) -> float:
    """Linear warm-up then inverse-square-root decay: scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return scale * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = named_params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int):
        for n, _ in self.params:
            if f"adam.m.{n}" in tensors:
                self.m[n][...] = tensors[f"adam.m.{n}"]
                self.v[n][...] = tensors[f"adam.v.{n}"]
        self.t = step


# ---------------------------------------------------------------------------
# model state

def model_tensors(params: ModelParams) -> list[tuple[str, Tensor]]:
    return list(named_tensors(params, "model"))


def state_dict(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: t.data for n, t in model_tensors(params)}


def load_state(params: ModelParams, tensors: dict[str, np.ndarray]) -> None:
    for n, t in model_tensors(params):
        if n not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {n}")
        src = tensors[n]
        if src.shape != t.shape:
            raise CheckpointError(f"{n}: checkpoint shape {src.shape} vs model {t.shape}")
        t.data = src.astype(src.dtype, copy=True)


def build_model(cfg: ExperimentConfig, rng: Rng | None, dtype) -> ModelParams:
    return create_model(cfg.model, rng, dtype)


@dataclass
class LoadedModel:
    cfg: ExperimentConfig
    params: ModelParams
    step: int
    checkpoint: Checkpoint


def load_model(path: str, expect_cfg: ExperimentConfig | None = None) -> LoadedModel:
    """Rebuild a model from a checkpoint, optionally refusing a different architecture."""
    ckpt = load_checkpoint(path, architecture_hash(expect_cfg) if expect_cfg is not None else None)
    cfg = parse_config(ckpt.config_text)
    dtypes = {a.dtype for a in ckpt.tensors.values()}
    params = build_model(cfg, None, dtypes.pop() if len(dtypes) == 1 else np.float32)
    load_state(params, ckpt.tensors)
    return LoadedModel(cfg, params, ckpt.step, ckpt)


def make_checkpoint(cfg: ExperimentConfig, params: ModelParams, step: int, opt: Adam | None = None) -> Checkpoint:
    tensors = state_dict(params)
    if opt is not None:
        tensors.update(opt.state())
    return Checkpoint(dump_config(cfg), architecture_hash(cfg), step, tensors)


# ---------------------------------------------------------------------------
# training

def metric_columns(cfg: ExperimentConfig) -> list[str]:
    cols = ["step", "epoch", "lr", "loss", "nll", "balance_term", "kd_term"]
    cols += [f"f_c{c}_e{i}" for c in range(cfg.encoder.n_blocks) for i in range(cfg.encoder.n_experts)]
    return cols


def teacher_outputs(teacher: LoadedModel, batch: Batch) -> np.ndarray:
    x = Tensor(batch.x.astype(teacher.params.encoder.frontend.out_w.dtype, copy=False))
    with tn.no_grad():
        return encoder_forward(x, batch.x_lens, teacher.cfg.encoder, teacher.params.encoder, train=False).h.data


@dataclass
class TrainResult:
    params: ModelParams
    rows: list[dict]
    checkpoint: str
    metrics: str


def train(cfg: ExperimentConfig, teacher: LoadedModel | None = None, resume: str | None = None,
          utts: list[Utterance] | None = None) -> TrainResult:
    """Mini-batch Adam on the full objective; writes ``metrics.csv`` and ``final.ckpt`` to ``train.out_dir``.

    Deterministic per ``train.seed``: initialisation, batch order, dropout and
    gate noise each draw from their own child stream of that seed.
    """
    tc = cfg.train
    dtype = np.dtype(tc.dtype)
    if utts is None:
        utts = load_dataset(tc.data)
    if not utts:
        raise tn.UsageError(f"dataset {tc.data} is empty")
    rng = Rng(tc.seed)
    params = build_model(cfg, rng.child("init"), dtype)
    if teacher is not None:
        check_teacher(cfg, teacher)
        if tc.init_from_teacher:
            if architecture_hash(teacher.cfg) != architecture_hash(cfg):
                raise ConfigError("init_from_teacher needs the student and teacher architectures to match")
            params = clone(teacher.params)

    named = [(n, t) for n, t in model_tensors(params) if t.requires_grad]
    opt = Adam(named, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    step = 0
    if resume:
        loaded = load_checkpoint(resume, architecture_hash(cfg))
        load_state(params, loaded.tensors)
        opt.load_state(loaded.tensors, loaded.step)
        step = loaded.step

    data_rng = rng.child("data")
    rngs = RngStreams.from_rng(rng.child("forward"))
    os.makedirs(tc.out_dir, exist_ok=True)
    metrics_path = os.path.join(tc.out_dir, "metrics.csv")
    columns = metric_columns(cfg)
    rows = []
    use_kd = teacher is not None and cfg.loss.beta > 0
    max_steps = tc.max_steps or None

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        done = max_steps is not None and step >= max_steps
        for epoch in range(tc.epochs):
            if done:
                break
            for batch in make_batches(utts, tc.batch_size, data_rng, dtype):
                step += 1
                teacher_h = teacher_outputs(teacher, batch) if use_kd else None
                try:
                    parts = compute_losses(params, cfg.model, batch, cfg.loss, True, rngs, teacher_h)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"step {step}: {e} during the forward pass") from e
                for term in ("nll", "balance_term", "kd_term"):
                    if not np.isfinite(getattr(parts, term)):
                        raise TrainingDiverged(f"step {step}: non-finite {term}")
                opt.zero_grad()
                parts.loss.backward()
                lr = lr_schedule(step, cfg.optim.warmup, cfg.optim.lr_scale, cfg.encoder.d_model)
                opt.step(lr)
                row = {"step": step, "epoch": epoch, "lr": lr, "loss": parts.loss.item(), "nll": parts.nll,
                       "balance_term": parts.balance_term, "kd_term": parts.kd_term}
                for c, s in enumerate(parts.module_stats):
                    for i, f in enumerate(s.f):
                        row[f"f_c{c}_e{i}"] = float(f)
                rows.append(row)
                writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in columns])
                if step % 50 == 0:
                    log.info("step %d nll %.4f balance %.5f kd %.5f", step, parts.nll,
                             parts.balance_term, parts.kd_term)
                if tc.save_every and step % tc.save_every == 0:
                    save_checkpoint(os.path.join(tc.out_dir, f"step{step}.ckpt"),
                                    make_checkpoint(cfg, params, step, opt))
                if max_steps is not None and step >= max_steps:
                    done = True
                    break

    final = os.path.join(tc.out_dir, "final.ckpt")
    save_checkpoint(final, make_checkpoint(cfg, params, step, opt))
    return TrainResult(params, rows, final, metrics_path)


def check_teacher(cfg: ExperimentConfig, teacher: LoadedModel) -> None:
    t, s = teacher.cfg.encoder, cfg.encoder
    if (t.d_model, t.feat_dim) != (s.d_model, s.feat_dim):
        raise ConfigError(f"teacher encoder (d_model={t.d_model}, feat_dim={t.feat_dim}) cannot be aligned "
                          f"with student (d_model={s.d_model}, feat_dim={s.feat_dim})")


def distill_train(cfg: ExperimentConfig) -> TrainResult:
    if not cfg.train.teacher:
        raise ConfigError("distillation needs train.teacher to name a checkpoint")
    return train(cfg, teacher=load_model(cfg.train.teacher))


# ---------------------------------------------------------------------------
# evaluation

def edit_distance(ref: list, hyp: list) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(refs: list[list[int]], hyps: list[list[int]]) -> float:
    total = sum(len(r) for r in refs)
    if total == 0:
        raise tn.UsageError("token error rate needs at least one reference token")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


@dataclass
class Hypothesis:
    id: str
    tokens: list[int]
    score: float

    def line(self) -> str:
        return f"{self.id}\t{' '.join(map(str, self.tokens))}\t{self.score!r}"


def decode(params: ModelParams, cfg: ExperimentConfig, utts: list[Utterance], beam: int,
           max_len: int = 0) -> list[Hypothesis]:
    """Beam-search every utterance; results come back sorted by utterance id."""
    if not utts:
        raise tn.UsageError("cannot decode an empty dataset")
    max_len = max_len or max(len(u.tokens) for u in utts) + 2
    hyps = []
    for u in sorted(utts, key=lambda u: u.id):
        toks, score = beam_search(u.feats, params, cfg.model, beam, max_len)
        hyps.append(Hypothesis(u.id, strip_special(toks), score))
    return hyps


def evaluate(params: ModelParams, cfg: ExperimentConfig, utts: list[Utterance], beam: int,
             max_len: int = 0) -> tuple[float, list[Hypothesis]]:
    hyps = decode(params, cfg, utts, beam, max_len)
    refs = {u.id: u.tokens for u in utts}
    return token_error_rate([refs[h.id] for h in hyps], [h.tokens for h in hyps]), hyps
