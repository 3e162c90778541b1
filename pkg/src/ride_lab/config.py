"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .experts import ConfigError
from .losses import LossConfig, TemperatureSchedule
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar
    n_classes: int = 10
    dim: int = 16
    separation: float = 2.5
    pool_per_class: int = 1000
    test_per_class: int = 200
    cifar_train: str | None = None
    cifar_test: str | None = None
    n_max: int = 500
    imbalance_factor: float = 100.0
    shot_thresholds: tuple[int, int] = (100, 20)
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar"):
            raise ConfigError(f"data.source must be 'synthetic' or 'cifar', got {self.source!r}")
        if self.source == "cifar" and not (self.cifar_train and self.cifar_test):
            raise ConfigError("cifar source needs data.cifar_train and data.cifar_test")


@dataclass(frozen=True)
class ModelSpec:
    hidden_dims: tuple[int, ...] = (128, 128)
    n_experts: int = 3
    width_factor: float = 0.75
    split: int | None = None
    classifier: str = "cosine"  # cosine | linear
    cosine_scale: float = 30.0

    def __post_init__(self):
        if self.classifier not in ("cosine", "linear"):
            raise ConfigError(f"model.classifier must be 'cosine' or 'linear', got {self.classifier!r}")


@dataclass(frozen=True)
class RouterConfig:
    hidden: int = 16
    top_s: int = 30
    omega_on: float = 100.0
    threshold: float = 0.5
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 128
    label_rule: str = "prefix"  # prefix | expert


@dataclass(frozen=True)
class MethodSpec:
    """One contender in a bias/variance study: overrides on the run's model and loss."""

    name: str
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BiasVarConfig:
    n_reps: int = 20
    methods: tuple[MethodSpec, ...] = ()


@dataclass(frozen=True)
class DistillRunConfig:
    kd_temperature: float = 2.0
    kd_weight: float = 1.0
    teacher: str | None = None
    teacher_experts: int = 6


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: ModelSpec = ModelSpec()
    loss: LossConfig = LossConfig()
    temperature: TemperatureSchedule = TemperatureSchedule()
    train: TrainConfig = TrainConfig()
    router: RouterConfig = RouterConfig()
    distill: DistillRunConfig = DistillRunConfig()
    biasvar: BiasVarConfig = BiasVarConfig()
    seed: int = 0
    out: str = "runs/default"

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.distill.kd_temperature, self.distill.kd_weight, self.distill.teacher)


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is typing.Union or (origin is not None and origin.__name__ == "UnionType"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (str, dict, bool) and isinstance(value, tp):
        return value
    raise ConfigError(f"{where}: {value!r} is not a valid {getattr(tp, '__name__', tp)}")


def from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path: str | os.PathLike | None, **overrides) -> RunConfig:
    """Read a JSON run config; ``overrides`` replace top-level keys."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    cfg = from_dict(RunConfig, raw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.loss.drw_start_epoch > cfg.train.epochs:
        raise ConfigError("loss.drw_start_epoch exceeds train.epochs")
    for p in (cfg.data.cifar_train, cfg.data.cifar_test, cfg.distill.teacher):
        if p is not None and not _resolve_data_path(p).exists():
            raise ConfigError(f"referenced file does not exist: {p}")


def _resolve_data_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get("RIDE_LAB_DATA")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def method_config(cfg: RunConfig, method: MethodSpec) -> tuple[ModelSpec, LossConfig]:
    model = from_dict(ModelSpec, {**to_dict(cfg.model), **method.model}, f"biasvar.{method.name}.model")
    loss = from_dict(LossConfig, {**to_dict(cfg.loss), **method.loss}, f"biasvar.{method.name}.loss")
    return model, loss


def write_resolved(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
