"""Run configuration: a flat ``key = value`` file with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .discretize import DiscretizeSpec
from .losses import LossSpec
from .netcore import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 140
    batch_size: int = 64
    lr_base: float = 5e-4
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    clip_norm: float = 2.0
    ema_start: float = 0.996
    ema_end: float = 1.0
    seed: int = 0
    eval_every_epochs: int = 10
    knn_temp: float = 0.07

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if not (0.0 <= self.ema_start <= 1.0 and 0.0 <= self.ema_end <= 1.0):
            raise ValueError("ema_start and ema_end must lie in [0, 1]")
        if self.lr_base < 0 or self.weight_decay < 0:
            raise ValueError("lr_base and weight_decay must be >= 0")
        if self.warmup_epochs < 0 or self.eval_every_epochs < 0:
            raise ValueError("warmup_epochs and eval_every_epochs must be >= 0")
        if not 0 <= self.seed < 2 ** 32:
            raise ValueError("seed must fit in 32 bits")
        if self.knn_temp <= 0:
            raise ValueError("knn_temp must be > 0")


@dataclass
class Paths:
    train_features: Optional[str] = None
    eval_features: Optional[str] = None
    out_dir: str = "out"


# config key -> (section attribute, field name)
KEYS = {
    "vocab_size": ("model", "vocab_size"),
    "seq_len": ("model", "seq_len"),
    "d_model": ("model", "d_model"),
    "n_heads": ("model", "n_heads"),
    "dec_depth": ("model", "dec_depth"),
    "enc_depth": ("model", "enc_depth"),
    "proj_hidden": ("model", "proj_hidden"),
    "proj_bottleneck": ("model", "proj_bottleneck"),
    "n_prototypes": ("model", "n_prototypes"),
    "discretize": ("disc", "kind"),
    "tau_start": ("disc", "tau_start"),
    "tau_end": ("disc", "tau_end"),
    "tau_schedule": ("disc", "tau_schedule"),
    "st_hard": ("disc", "st_hard"),
    "vq_beta": ("disc", "vq_beta"),
    "strategy": ("loss", "strategy"),
    "alpha": ("loss", "alpha"),
    "beta": ("loss", "beta"),
    "strategy_switch_epoch": ("loss", "strategy_switch_epoch"),
    "teacher_temp": ("loss", "teacher_temp"),
    "student_temp": ("loss", "student_temp"),
    "center_momentum": ("loss", "center_momentum"),
    "granularity_lambda": ("loss", "granularity_lambda"),
    "cross_view": ("loss", "cross_view"),
    "aggregate_loss_term": ("loss", "aggregate_loss_term"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr_base": ("train", "lr_base"),
    "warmup_epochs": ("train", "warmup_epochs"),
    "weight_decay": ("train", "weight_decay"),
    "clip_norm": ("train", "clip_norm"),
    "ema_start": ("train", "ema_start"),
    "ema_end": ("train", "ema_end"),
    "seed": ("train", "seed"),
    "eval_every_epochs": ("train", "eval_every_epochs"),
    "knn_temp": ("train", "knn_temp"),
    "train_features": ("paths", "train_features"),
    "eval_features": ("paths", "eval_features"),
    "out_dir": ("paths", "out_dir"),
}

_SECTIONS = {"model": ModelConfig, "disc": DiscretizeSpec, "loss": LossSpec, "train": TrainConfig, "paths": Paths}


def _field_types() -> dict:
    types = {}
    for key, (section, name) in KEYS.items():
        f = next(f for f in dataclasses.fields(_SECTIONS[section]) if f.name == name)
        types[key] = f.type if isinstance(f.type, str) else f.type.__name__
    return types


_TYPES = _field_types()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    disc: DiscretizeSpec = field(default_factory=DiscretizeSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    def get(self, key: str):
        section, name = KEYS[key]
        return getattr(getattr(self, section), name)

    def to_text(self) -> str:
        lines = []
        for key in KEYS:
            value = self.get(key)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides) -> "RunConfig":
        return build_config(overrides, base=self)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if raw.lower() in ("none", "") and kind.startswith("Optional"):
        return None
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def build_config(values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Build a RunConfig from typed ``{key: value}``, on top of ``base`` or the defaults."""
    base = base or RunConfig()
    kwargs = {s: dataclasses.asdict(getattr(base, s)) for s in _SECTIONS}
    for key, value in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = KEYS[key]
        kwargs[section][name] = value
    out = {}
    for section, cls in _SECTIONS.items():
        out[section] = cls(**kwargs[section])
    return RunConfig(**out)


def parse_config_text(text: str, source: str = "<config>", require: tuple = ()) -> RunConfig:
    values: dict = {}
    lines: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
        lines[key] = lineno
    try:
        cfg = build_config(values)
    except ValueError as e:
        raise ConfigError(f"{source}:{_blame(values, lines)}: {e}") from None
    missing = [k for k in require if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    return cfg


def _blame(values: dict, lines: dict) -> str:
    """Find the line whose removal makes the config valid."""
    for key in values:
        trial = {k: v for k, v in values.items() if k != key}
        try:
            build_config(trial)
        except ValueError:
            continue
        return str(lines[key])
    return ",".join(str(lines[k]) for k in values) or "?"


def parse_config(path, require: tuple = ()) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), source=str(path), require=require)
