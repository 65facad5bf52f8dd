"""Run configuration and its text (INI-style key=value) serialization."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace

from .augment import AugmentPolicy
from .loss import LossConfig
from .nets import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    optimizer: str = "sgd"
    opt_momentum: float = 0.9
    weight_decay: float = 1e-4
    bn_weight_decay: bool = False
    lr: float = 0.1
    lr_final: float = 0.0
    batch_size: int = 256
    ema_m: float = 0.99
    queue_capacity: int = 16384
    combine_k: int = 2
    single_embedding: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    prefetch: int = 0

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ConfigError(f"only the sgd optimizer is supported, got {self.optimizer!r}")
        for name in ("batch_size", "queue_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("epochs", "checkpoint_every", "prefetch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ConfigError(f"ema_m must lie in [0, 1], got {self.ema_m}")
        if self.combine_k not in (1, 2, 3, 4):
            raise ConfigError(f"combine_k must be one of 1..4, got {self.combine_k}")
        if self.lr < 0 or self.lr_final < 0 or self.weight_decay < 0 or not 0 <= self.opt_momentum < 1:
            raise ConfigError("lr, lr_final, weight_decay must be >= 0 and opt_momentum in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 90
    lr: float = 0.8
    lr_final: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coeff: float = 0.001
    lars_eps: float = 1e-8
    batch_size: int = 256
    # LARS trust scaling of the probe layer; off by default because a zero-initialized
    # layer under trust_coeff 0.001 moves ~lr*0.001 relative per step and stays near chance
    adapt_probe: bool = False
    augment_train: bool = True
    crop_padding: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.crop_padding < 0:
            raise ConfigError("eval epochs >= 0, batch_size >= 1, lr >= 0 and crop_padding >= 0 required")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_section(self, section: str, **changes) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **changes)})


SECTIONS = ("train", "model", "augment", "loss", "eval")
# INI key -> dataclass field name, where they differ
ALIASES = {("loss", "lambda"): "lam"}


def _key(section: str, name: str) -> str:
    for (sec, key), fname in ALIASES.items():
        if sec == section and fname == name:
            return key
    return name


def _field_name(section: str, key: str) -> str:
    return ALIASES.get((section, key), key)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse(text, inner[0])
    if origin is tuple:
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse(p, a) for p, a in zip(parts, args))
    if tp is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _hints(cls) -> dict:
    import sys

    mod = sys.modules[cls.__module__]
    return typing.get_type_hints(cls, vars(mod))


def section_from_mapping(cls, section: str, mapping: dict[str, str], base=None):
    hints = _hints(cls)
    names = {f.name for f in fields(cls)}
    changes = {}
    for key, raw in mapping.items():
        name = _field_name(section, key)
        if name not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            changes[name] = _parse(raw, hints[name])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{section}] {key}: {e}") from None
    try:
        return replace(base, **changes) if base is not None else cls(**changes)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def to_ini(run: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(run, section)
        for f in fields(obj):
            lines.append(f"{_key(section, f.name)} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    run = base or RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(run, section)
        new = section_from_mapping(type(obj), section, dict(parser[section]), base=obj)
        run = replace(run, **{section: new})
    return run


def load(path) -> RunConfig:
    with open(path) as fh:
        return from_ini(fh.read())


def full_defaults() -> RunConfig:
    """Full-scale setting: ResNet-18, 2048-d heads, batch 256, 200 epochs."""
    return RunConfig()


def toy_defaults(**train) -> RunConfig:
    """Desk-scale setting used by the acceptance runs."""
    return RunConfig(
        train=TrainConfig(**{"epochs": 30, "batch_size": 128, "queue_capacity": 1024, **train}),
        model=ModelConfig.toy(),
    )


def asdict(run: RunConfig) -> dict:
    return dataclasses.asdict(run)
