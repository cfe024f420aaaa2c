"""Run configuration: a strict ``key = value`` file with [model] [train] [data] [eval] sections."""

from __future__ import annotations

import configparser
import types
import typing
from dataclasses import dataclass, field, fields, replace

from .data import SHIFT_KINDS, ShiftSpec
from .model import ModelConfig
from .seeding import derive_seed
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "ModelSection",
    "TrainSection",
    "DataSection",
    "EvalSection",
    "RunConfig",
    "parse_config",
    "serialize_config",
    "load_config",
]


class ConfigError(ValueError):
    """Raised for malformed, unknown or out-of-range configuration values."""


@dataclass(frozen=True)
class ModelSection:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    patch_size: int = 4
    image_size: int = 32
    vocab_size: int = 64
    mlp_ratio: int = 4


@dataclass(frozen=True)
class TrainSection:
    seed: int = 0
    base_lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    total_steps: int = 2000
    warmup_steps: int | None = None
    batch_size: int = 16
    mask_ratio: float = 0.4
    min_block: int | None = None
    max_aspect: float = 3.33
    augment: bool = True
    pretrain_crop: bool = False
    tokenizer_iters: int = 50
    checkpoint_every: int = 500
    finetune_epochs: int = 50
    finetune_lr: float = 3e-3
    finetune_resolution_switch_step: float = 0.8


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    per_class: int = 60
    val_per_class: int = 20
    channels: int = 3
    ood_class: bool = True
    mesh_count: int = 60
    target_mesh_count: int = 100


@dataclass(frozen=True)
class EvalSection:
    shift_kinds: tuple[str, ...] = SHIFT_KINDS
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self) -> None:
        # Build the derived objects once so range errors surface at parse time.
        try:
            self.model_config()
            self.train_config()
            self.shift_specs()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        d = self.data
        if d.num_classes < 2 or d.per_class < 1 or d.val_per_class < 1:
            raise ConfigError("data needs num_classes >= 2 and at least one image per class in each split")
        if d.mesh_count < 0 or d.target_mesh_count < 0:
            raise ConfigError("mesh counts must be >= 0")
        if self.train.checkpoint_every < 1 or self.train.tokenizer_iters < 1:
            raise ConfigError("checkpoint_every and tokenizer_iters must be >= 1")

    @property
    def seed(self) -> int:
        return self.train.seed

    def sub_seed(self, domain: str) -> int:
        return derive_seed(self.seed, domain)

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(
            layers=m.layers,
            hidden=m.hidden,
            heads=m.heads,
            patch_size=m.patch_size,
            image_size=m.image_size,
            vocab_size=m.vocab_size,
            num_classes=num_classes or self.data.num_classes,
            mlp_ratio=m.mlp_ratio,
            channels=self.data.channels,
        )

    def head_classes(self) -> int:
        return self.data.num_classes + (1 if self.data.ood_class else 0)

    def train_config(self) -> TrainConfig:
        t = self.train
        kwargs = {f.name: getattr(t, f.name) for f in fields(TrainConfig) if hasattr(t, f.name)}
        kwargs["rng_seed"] = derive_seed(t.seed, "train")
        return TrainConfig(**kwargs)

    def shift_specs(self) -> list[ShiftSpec]:
        seed = derive_seed(self.seed, "shift")
        return [ShiftSpec(k, s, seed) for k in self.eval.shift_kinds for s in self.eval.severities]

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, train=replace(self.train, seed=seed))


_SECTIONS = {"model": ModelSection, "train": TrainSection, "data": DataSection, "eval": EvalSection}


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("auto", "none", ""):
            return None
        return _parse_value(raw, args[0], key)
    if origin is tuple:
        (inner, _) = typing.get_args(tp)
        return tuple(_parse_value(part, inner, key) for part in raw.split(",") if part.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are not silently folded
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse_value(raw, hints[key], f"{name}.{key}")
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return RunConfig(**sections)


def serialize_config(config: RunConfig) -> str:
    out = []
    for name in _SECTIONS:
        out.append(f"[{name}]")
        section = getattr(config, name)
        for f in fields(section):
            out.append(f"{f.name} = {_format(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
