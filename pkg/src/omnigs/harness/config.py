"""Run configuration: a tree of frozen dataclasses read from and written to JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ..collaboration import LossWeights
from ..diffcore.optim import Schedule
from ..geometry import VolumeSpec
from ..model import ModelConfig
from .scenes import SceneConfig

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    """Bad configuration input; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    warmup_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    seed: int = 0
    novel_views_per_step: int = 2
    input_views_per_step: int = 2
    depth_noise: float = 0.1
    checkpoint_every: int = 500
    dtype: str = "float32"
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be >= 0")
        if self.novel_views_per_step < 1 or self.input_views_per_step < 1:
            raise ConfigError("views per step must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def volume(self) -> VolumeSpec:
        return self.scene.volume

    @property
    def torch_dtype(self):
        return DTYPES[self.train.dtype]

    def schedule(self) -> Schedule:
        return Schedule(self.optim.lr, self.optim.warmup_steps, max(self.train.steps, 1))

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def replace(self, **sections) -> "RunConfig":
        """Return a copy with ``section={field: value}`` overrides applied."""
        kw = {}
        for name, upd in sections.items():
            kw[name] = dataclasses.replace(getattr(self, name), **upd)
        return dataclasses.replace(self, **kw)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in d.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _coerce(tp, v, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, v, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], x, where) for x in v)
        if len(args) != len(v):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(v)}")
        return tuple(_coerce(a, x, where) for a, x in zip(args, v))
    if tp is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{where}: expected true/false")
        return v
    if tp is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{where}: expected an integer")
        return v
    if tp is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(v)
    if tp is str:
        if not isinstance(v, str):
            raise ConfigError(f"{where}: expected a string")
        return v
    return v
