"""Synthetic token-to-frames corpus and the on-disk dataset format.

A dataset directory holds two files:

``feats.bin``
    Utterance records back to back. Each record is a header
    ``<u32 id_len><id bytes, utf-8><u32 T><u32 F>`` followed by ``T*F``
    little-endian float32 values in row-major (frame-major) order.
``text``
    One line per utterance: ``<id> <token id> <token id> ...``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .seq2seq import EOS, Batch
from .tensor import Rng

FEATS = "feats.bin"
TEXT = "text"


class DatasetError(OSError):
    pass


@dataclass
class SyntheticSpec:
    vocab: int = 8
    frames_per_token: int = 8
    feat_dim: int = 20
    pattern_seed: int = 1234
    noise_std: float = 0.1
    min_tokens: int = 2
    max_tokens: int = 6

    def __post_init__(self):
        if self.frames_per_token < 4:
            raise ValueError("frames_per_token must be >= 4 to survive 4x subsampling")
        if self.vocab < 4:
            raise ValueError("vocab must leave at least one real token after <pad>/<sos>/<eos>")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")


@dataclass
class Utterance:
    id: str
    feats: np.ndarray  # [T, F] float32
    tokens: list[int]


def token_patterns(spec: SyntheticSpec) -> np.ndarray:
    """Fixed per-class frame patterns, [vocab, frames_per_token, feat_dim]; rows for special ids unused."""
    rng = Rng(spec.pattern_seed).child("patterns")
    return rng.normal((spec.vocab, spec.frames_per_token, spec.feat_dim)).astype(np.float32)


def synth_utterances(spec: SyntheticSpec, n_utts: int, seed: int) -> list[Utterance]:
    patterns = token_patterns(spec)
    rng = Rng(seed).child("synth")
    utts = []
    width = len(str(max(n_utts - 1, 0)))
    for i in range(n_utts):
        n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        toks = [int(t) for t in rng.integers(EOS + 1, spec.vocab, size=n)]
        frames = np.concatenate([patterns[t] for t in toks], axis=0)
        if spec.noise_std > 0:
            frames = frames + rng.normal(frames.shape, spec.noise_std, np.float32)
        utts.append(Utterance(f"utt{i:0{width}d}", frames.astype(np.float32), toks))
    return utts


def write_dataset(utts: list[Utterance], out_dir: str) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, FEATS), "wb") as fh:
            for u in utts:
                key = u.id.encode()
                T, F = u.feats.shape
                fh.write(struct.pack("<I", len(key)) + key + struct.pack("<II", T, F))
                fh.write(np.ascontiguousarray(u.feats, dtype="<f4").tobytes())
        with open(os.path.join(out_dir, TEXT), "w") as fh:
            for u in utts:
                fh.write(" ".join([u.id, *map(str, u.tokens)]) + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out_dir}: {e.strerror}") from e


def synth_dataset(spec: SyntheticSpec, n_utts: int, seed: int, out_dir: str) -> list[Utterance]:
    utts = synth_utterances(spec, n_utts, seed)
    write_dataset(utts, out_dir)
    return utts


def read_features(path: str) -> dict[str, np.ndarray]:
    feats = {}
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        key = buf[pos:pos + n].decode()
        pos += n
        T, F = struct.unpack_from("<II", buf, pos)
        pos += 8
        feats[key] = np.frombuffer(buf, dtype="<f4", count=T * F, offset=pos).reshape(T, F).astype(np.float32)
        pos += 4 * T * F
    return feats


def load_dataset(path: str) -> list[Utterance]:
    """Utterances in transcript order."""
    feats_path, text_path = os.path.join(path, FEATS), os.path.join(path, TEXT)
    for p in (path, feats_path, text_path):
        if not os.path.exists(p):
            raise DatasetError(f"dataset path does not exist: {p}")
    feats = read_features(feats_path)
    utts = []
    with open(text_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] not in feats:
                raise DatasetError(f"{text_path}: no features for utterance {parts[0]!r}")
            utts.append(Utterance(parts[0], feats[parts[0]], [int(t) for t in parts[1:]]))
    return utts


def make_batches(utts: list[Utterance], batch_size: int, rng: Rng | None = None,
                 dtype=np.float32) -> list[Batch]:
    """Length-sorted buckets of ``batch_size``; bucket order shuffled when ``rng`` is given."""
    order = sorted(range(len(utts)), key=lambda i: (utts[i].feats.shape[0], utts[i].id))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [Batch.from_lists([utts[i].feats for i in ch], [utts[i].tokens for i in ch],
                             [utts[i].id for i in ch], dtype=dtype) for ch in chunks]
