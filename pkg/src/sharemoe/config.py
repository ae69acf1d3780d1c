"""Experiment configuration and its flat ``section.key = value`` text format.

Blank lines and ``#`` comments are ignored. Every key must name a field of
one of the sections below; anything else is rejected so that a typo in an
ablation config cannot silently fall back to a default. Relative paths are
resolved against the directory holding the config file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .encoder import EncoderConfig
from .seq2seq import DecoderConfig, LossWeights, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr_scale: float = 1.0
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 8
    max_steps: int = 0          # 0 = no cap
    save_every: int = 0         # 0 = final checkpoint only
    out_dir: str = "runs/default"
    data: str = "data/train"
    dtype: str = "float32"
    teacher: str = ""           # checkpoint of a frozen teacher encoder
    init_from_teacher: bool = False


@dataclass
class SynthConfig:
    """Synthetic corpus settings; vocabulary and feature size come from the model sections."""
    frames_per_token: int = 8
    pattern_seed: int = 1234
    noise_std: float = 0.1
    n_utts: int = 64
    min_tokens: int = 2
    max_tokens: int = 6
    seed: int = 0
    out_dir: str = "data/train"


@dataclass
class EvalConfig:
    data: str = "data/test"
    beam: int = 4
    max_len: int = 0  # 0 = longest reference + 2


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.encoder.d_model != self.decoder.d_model:
            raise ConfigError(f"encoder.d_model={self.encoder.d_model} != decoder.d_model={self.decoder.d_model}")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.encoder, self.decoder)

    @property
    def synthetic_spec(self) -> SyntheticSpec:
        s = self.synth
        return SyntheticSpec(self.decoder.vocab, s.frames_per_token, self.encoder.feat_dim,
                             s.pattern_seed, s.noise_std, s.min_tokens, s.max_tokens)


SECTIONS = [f.name for f in dataclasses.fields(ExperimentConfig)]
PATH_KEYS = {("train", "out_dir"), ("train", "data"), ("train", "teacher"),
             ("synth", "out_dir"), ("eval", "data")}
ARCH_SECTIONS = ("encoder", "decoder")
# regularisation knobs that do not change the parameter set
NON_ARCH_KEYS = {"dropout", "noise_std", "bn_momentum"}


def _convert(raw: str, tp, where: str):
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return tp(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from e


def parse_config(text: str, base_dir: str = ".", overrides: dict | None = None) -> ExperimentConfig:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        items.append((f"line {lineno}", key, raw))
    for key, raw in (overrides or {}).items():
        items.append(("override", key, str(raw)))

    for where, key, raw in items:
        if "." not in key:
            raise ConfigError(f"{where}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in values:
            raise ConfigError(f"{where}: unknown section {section!r}")
        cls = _section_cls(section)
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ConfigError(f"{where}: unknown key {key!r}")
        val = _convert(raw, hints[name], f"{where} ({key})")
        if (section, name) in PATH_KEYS and val and not os.path.isabs(val):
            val = os.path.normpath(os.path.join(base_dir, val))
        values[section][name] = val

    try:
        parts = {s: _section_cls(s)(**values[s]) for s in SECTIONS}
        return ExperimentConfig(**parts)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def _section_cls(section: str):
    return typing.get_type_hints(ExperimentConfig)[section]


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text, os.path.dirname(os.path.abspath(path)), overrides)


def dump_config(cfg: ExperimentConfig, sections=SECTIONS) -> str:
    lines = []
    for s in sections:
        part = getattr(cfg, s)
        for f in dataclasses.fields(part):
            v = getattr(part, f.name)
            lines.append(f"{s}.{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def architecture_hash(cfg: ExperimentConfig) -> str:
    """Digest of the model-shaping sections; checkpoints refuse to load under a different one."""
    lines = [ln for ln in dump_config(cfg, ARCH_SECTIONS).splitlines()
             if ln.split("=")[0].strip().split(".")[1] not in NON_ARCH_KEYS]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()
