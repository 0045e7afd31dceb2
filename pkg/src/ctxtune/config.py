"""Experiment configuration: nested TOML files plus dotted-path CLI
overrides. Unknown keys are rejected, overrides win over file values."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .contextgen import PROMPTS
from .datasynth import CorpusConfig
from .models import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_feat: int = 16
    d_model: int = 64
    d_text: int = 32
    acoustic_layers: int = 2
    text_layers: int = 2
    encoder_heads: int = 4
    ffn_mult: int = 4
    fusion_heads: int = 1
    fusion_head_dim: int = 32
    acoustic_window: int = 1
    embedding_mode: str = "cls"


@dataclass
class TrainSection:
    variant: str = "generative_aware"
    task: str = "asr"
    prompt: str = "P4"
    alpha: float = 2.0
    squared_context_loss: bool = False
    steps: int = 2400
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: str = "none"      # none | cosine
    # Polyak average of the weights, used for checkpoints and evaluation;
    # 0 disables averaging
    ema_decay: float = 0.998
    clip_norm: float = 5.0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_context_source: str = "ground_truth"   # ground_truth | decoded
    checkpoints: int = 10


@dataclass
class GeneratorSection:
    kind: str = "oracle"    # oracle | echo | http
    seed: int = 0
    p_noise: float = 0.0
    overlap_p1: float = 0.5
    endpoint: str = ""
    timeout: float = 10.0
    retries: int = 2
    model_name: str = ""


@dataclass
class PathsSection:
    manifest: str = "corpus.jsonl"
    features: str = "features.bin"
    cache: str = "context_cache.jsonl"
    out_dir: str = "runs"


@dataclass
class TrainConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self):
        if self.train.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.train.variant!r}")
        if self.train.prompt not in PROMPTS:
            raise ConfigError(f"unknown prompt {self.train.prompt!r}")
        if self.train.alpha < 0:
            raise ConfigError("train.alpha must be non-negative")
        if not self.train.seeds:
            raise ConfigError("train.seeds must be non-empty")
        if self.train.task not in ("asr", "sentiment"):
            raise ConfigError(f"unknown task {self.train.task!r}")
        if self.train.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"unknown lr_decay {self.train.lr_decay!r}")
        if not 0.0 <= self.train.ema_decay < 1.0:
            raise ConfigError("train.ema_decay must be in [0, 1)")
        if self.train.eval_context_source not in ("ground_truth", "decoded"):
            raise ConfigError(
                f"unknown eval_context_source {self.train.eval_context_source!r}")
        if self.generator.kind not in ("oracle", "echo", "http"):
            raise ConfigError(f"unknown generator kind {self.generator.kind!r}")
        return self


def _coerce(value, target_type, key):
    if isinstance(value, str) and target_type is not str:
        try:
            if target_type is bool:
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            if target_type is list:
                return [int(v) for v in value.split(",") if v]
            return target_type(value)
        except ValueError:
            raise ConfigError(f"cannot parse {value!r} for key {key!r}")
    if target_type in (int, float) and isinstance(value, (int, float)) \
            and not isinstance(value, bool):
        return target_type(value)
    if not isinstance(value, target_type):
        raise ConfigError(f"key {key!r}: expected {target_type.__name__}, "
                          f"got {type(value).__name__}")
    return value


def _section_fields(section):
    return {f.name: f for f in fields(section)}


def _apply_section(section, values, prefix):
    known = _section_fields(section)
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        ftype = known[key].type
        ftype = {"int": int, "float": float, "str": str, "bool": bool,
                 "list": list}.get(ftype, ftype) if isinstance(ftype, str) else ftype
        setattr(section, key, _coerce(value, ftype, f"{prefix}{key}"))


def load_config(path=None, overrides=None) -> TrainConfig:
    """Build a TrainConfig from an optional TOML file and dotted overrides.

    Override keys may be fully qualified ("train.alpha") or bare leaf
    names when unambiguous ("alpha").
    """
    cfg = TrainConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    if path:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}")
        for name, values in raw.items():
            if name not in sections:
                raise ConfigError(f"unknown config section {name!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a table")
            _apply_section(sections[name], values, f"{name}.")

    for key, value in (overrides or {}).items():
        if "." in key:
            sec_name, leaf = key.split(".", 1)
            if sec_name not in sections or "." in leaf:
                raise ConfigError(f"unknown config key {key!r}")
            _apply_section(sections[sec_name], {leaf: value}, f"{sec_name}.")
        else:
            owners = [n for n, s in sections.items() if key in _section_fields(s)]
            if not owners:
                raise ConfigError(f"unknown config key {key!r}")
            if len(owners) > 1:
                raise ConfigError(
                    f"ambiguous key {key!r} (in sections {owners}); qualify it")
            _apply_section(sections[owners[0]], {key: value}, f"{owners[0]}.")
    return cfg.validate()


def config_fingerprint(cfg: TrainConfig):
    import hashlib
    import json
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
