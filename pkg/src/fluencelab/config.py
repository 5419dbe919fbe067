"""Run configuration files: ``section.key = value`` lines.

Sections and their keys:

* ``phantom.*``  -> :class:`~fluencelab.phantom.PhantomConfig` fields
* ``backbone.*`` -> :class:`~fluencelab.models.BackboneConfig` fields
* ``train.*``    -> scalar :class:`~fluencelab.training.TrainConfig` fields
* ``weights.*``  -> :class:`~fluencelab.losses.LossWeights` (mse, grad, corr, energy)
* ``scope.*``    -> :class:`~fluencelab.losses.ScopeConfig` (corr, energy)
* ``stage1.*``   -> optional ``train.*`` overrides applied to Stage 1 only

Tuples are comma separated, booleans are ``true``/``false``. Blank lines
and ``#`` comments are ignored; any unknown section or key is an error.
"""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import format_value
from .losses import LossWeights, ScopeConfig
from .models import BackboneConfig
from .phantom import PhantomConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or invalid combination in a config file."""


_TRAIN_SCALARS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("weights", "scope"))


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = PhantomConfig()
    backbone: BackboneConfig = BackboneConfig()
    train: TrainConfig = TrainConfig()
    stage1: dict = field(default_factory=dict)

    def stage_config(self, stage: int) -> TrainConfig:
        """The ``TrainConfig`` for one stage, with ``stage1.*`` overrides applied for Stage 1."""
        if stage == 1:
            return replace(self.train, stage=1, **self.stage1)
        return replace(self.train, stage=2)

    def items(self) -> dict:
        out = {f"phantom.{k}": v for k, v in asdict(self.phantom).items()}
        out.update({f"backbone.{k}": v for k, v in asdict(self.backbone).items()})
        out.update({f"train.{k}": getattr(self.train, k) for k in _TRAIN_SCALARS})
        out.update({f"weights.{k}": v for k, v in asdict(self.train.weights).items()})
        out.update({f"scope.{k}": v for k, v in asdict(self.train.scope).items()})
        out.update({f"stage1.{k}": v for k, v in sorted(self.stage1.items())})
        return out


def _parse(text: str, typ, key: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin is tuple:
            args = typing.get_args(typ)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(_parse(p, a, key) for p, a in zip(parts, args))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Parse config text on top of ``base``."""
    raw: dict[str, dict[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        section, name = key.split(".", 1)
        bucket = raw.setdefault(section, {})
        if name in bucket:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        bucket[name] = value

    targets = {
        "phantom": (PhantomConfig, tuple(f.name for f in fields(PhantomConfig))),
        "backbone": (BackboneConfig, tuple(f.name for f in fields(BackboneConfig))),
        "train": (TrainConfig, _TRAIN_SCALARS),
        "weights": (LossWeights, tuple(f.name for f in fields(LossWeights))),
        "scope": (ScopeConfig, tuple(f.name for f in fields(ScopeConfig))),
        "stage1": (TrainConfig, tuple(k for k in _TRAIN_SCALARS if k != "stage")),
    }
    parsed: dict[str, dict] = {}
    for section, items in raw.items():
        if section not in targets:
            raise ConfigError(f"unknown config section {section!r}; valid: {', '.join(targets)}")
        cls, allowed = targets[section]
        hints = _hints(cls)
        for name, value in items.items():
            if name not in allowed:
                raise ConfigError(f"unknown key {section}.{name}; valid keys: {', '.join(allowed)}")
            parsed.setdefault(section, {})[name] = _parse(value, hints[name], f"{section}.{name}")

    try:
        train = base.train
        if "weights" in parsed:
            train = replace(train, weights=replace(train.weights, **parsed["weights"]))
        if "scope" in parsed:
            train = replace(train, scope=replace(train.scope, **parsed["scope"]))
        train = replace(train, **parsed.get("train", {}))
        cfg = RunConfig(
            phantom=replace(base.phantom, **parsed.get("phantom", {})),
            backbone=replace(base.backbone, **parsed.get("backbone", {})),
            train=train,
            stage1={**base.stage1, **parsed.get("stage1", {})},
        )
        cfg.stage_config(1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, base: RunConfig = RunConfig()) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.items().items())
