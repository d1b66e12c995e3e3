"""Run configuration: JSON in, validated dataclasses out.

Unknown keys are rejected at every level so that a typo never silently
falls back to a default.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .admm import AdmmConfig, RhoSchedule
from .errors import ConfigError
from .progressive import ProgressiveConfig, default_stages


@dataclass(frozen=True)
class ModelSection:
    arch: str = "lenet5"
    in_features: int = 2
    hidden: tuple[int, ...] = (16,)
    num_classes: int = 10

    def __post_init__(self):
        if self.arch not in ("lenet5", "mlp"):
            raise ConfigError(f"model.arch must be 'lenet5' or 'mlp', got {self.arch!r}")


@dataclass(frozen=True)
class DataSection:
    kind: str = "mnist"
    dir: str = "data/mnist"
    train_size: int | None = 10000
    val_size: int = 5000
    seed: int = 0
    # blobs only
    classes: int = 2
    n_per_class: int = 200
    dim: int = 2
    spacing: float = 6.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mnist", "blobs"):
            raise ConfigError(f"data.kind must be 'mnist' or 'blobs', got {self.kind!r}")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 15
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 0.85
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("pretrain.epochs and pretrain.batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"pretrain.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("pretrain.lr must be > 0 and pretrain.lr_decay in (0, 1]")


@dataclass(frozen=True)
class ProgressiveSection:
    num_steps: int = 3
    target: str = "binary"
    stages: tuple[str, ...] | None = None
    excluded: tuple[str, ...] = ()
    reset_rho: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: TrainSection = field(default_factory=TrainSection)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    progressive: ProgressiveSection = field(default_factory=ProgressiveSection)

    def progressive_config(self) -> ProgressiveConfig:
        p = self.progressive
        stages = list(p.stages) if p.stages is not None else default_stages(p.target, p.num_steps)
        return ProgressiveConfig(
            num_steps=p.num_steps,
            admm=self.admm,
            stages=stages,
            target=p.target,
            excluded=tuple(p.excluded),
            reset_rho=p.reset_rho,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}" if where else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(_coerce(args[0], v, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    # cross-field checks, before any compute
    cfg.progressive_config()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def reference_config() -> dict:
    """Every tunable with its default value."""
    return RunConfig().to_dict()


__all__ = ["RunConfig", "AdmmConfig", "RhoSchedule", "from_dict", "load_config", "reference_config"]
