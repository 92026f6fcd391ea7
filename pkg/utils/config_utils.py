import os
import torch
import logging
import dataclasses
from dataclasses import dataclass, field
from constants import AUGMENT_PAD, BACKBONE_WIDTHS, CIFAR_VARIANTS, META_ORDERS, TRAIN_MODES
from .errors import ConfigError
from .io_utils import load_yaml_file, save_yaml_file
from typing import Any, Dict, List, Optional, Type, TypeVar, Union, get_args, get_origin


LOGGER = logging.getLogger(__name__)

_C = TypeVar("_C")


@dataclass
class DataConfig:
    source: str = "synth"
    path: Optional[str] = None
    num_classes: int = 4
    n_train: int = 2000
    n_test: int = 1000
    image_size: int = 32
    augment: bool = False
    seed: int = 0

    def validate(self):
        if self.source not in ("synth", *CIFAR_VARIANTS):
            raise ConfigError("data.source", f"expected synth or one of {list(CIFAR_VARIANTS)}, got {self.source!r}")
        if self.source != "synth" and not self.path:
            raise ConfigError("data.path", f"a path is required for {self.source}")
        if self.source == "synth" and self.n_train < self.num_classes:
            raise ConfigError("data.n_train", "synthetic datasets need at least one sample per class")
        if self.image_size < 1:
            raise ConfigError("data.image_size", "must be positive")
        if self.augment and self.image_size <= AUGMENT_PAD:
            raise ConfigError("data.augment", f"reflect padding by {AUGMENT_PAD} needs images larger than {AUGMENT_PAD} px")


@dataclass
class ModelConfig:
    arch: str = "desk-cnn-4"
    widths: Optional[List[int]] = None
    in_channels: int = 3

    def validate(self):
        if not self.widths and self.arch not in BACKBONE_WIDTHS:
            raise ConfigError("model.arch", f"unknown backbone {self.arch!r}, expected one of {sorted(BACKBONE_WIDTHS)}")
        if self.widths is not None and len(self.widths) < 2:
            raise ConfigError("model.widths", "at least 2 stages are required")


@dataclass
class TrainConfig:
    mode: str = "metadistill"
    alpha: float = 0.5
    tau: float = 1.0
    lr_s: float = 0.1
    lr_g: float = 0.1
    # None keeps the inner step rate equal to the model's scheduled learning rate
    zeta: Optional[float] = None
    generator_period: int = 5
    epochs: int = 200
    milestones: List[int] = field(default_factory=lambda: [80, 140])
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    meta_batch_size: Optional[int] = None
    meta_steps: Optional[int] = None
    meta_order: str = "second"
    seed: int = 0
    check_isolation: bool = False
    teacher_checkpoint: Optional[str] = None
    teacher_widths: Optional[List[int]] = None

    def validate(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError("train.mode", f"expected one of {TRAIN_MODES}, got {self.mode!r}")
        if self.meta_order not in META_ORDERS:
            raise ConfigError("train.meta_order", f"expected one of {META_ORDERS}, got {self.meta_order!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("train.alpha", f"must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError("train.tau", f"must be > 0, got {self.tau}")
        if self.zeta is not None and not self.zeta > 0:
            raise ConfigError("train.zeta", f"must be > 0, got {self.zeta}")
        if self.generator_period < 1:
            raise ConfigError("train.generator_period", f"must be >= 1, got {self.generator_period}")
        if any(b <= a for a, b in zip(self.milestones[:-1], self.milestones[1:])):
            raise ConfigError("train.milestones", f"must be strictly increasing, got {self.milestones}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("train.epochs", f"must be >= 1, got {self.epochs}")
        if self.mode == "classic_kd" and not self.teacher_checkpoint:
            raise ConfigError("train.teacher_checkpoint", "classic_kd mode needs a teacher checkpoint")

    def lr_at(self, epoch: int, base_lr: Optional[float]=None) -> float:
        base_lr = self.lr_s if base_lr is None else base_lr
        return base_lr * self.lr_factor ** sum(1 for m in self.milestones if m <= epoch)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    num_threads: int = 1
    num_workers: int = 0
    deterministic: bool = True
    verbose: bool = False

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.train.validate()
        if self.num_threads < 1:
            raise ConfigError("num_threads", "must be >= 1")
        if self.num_workers < 0:
            raise ConfigError("num_workers", "must be >= 0")
        if self.deterministic and self.num_workers:
            raise ConfigError("num_workers", "prefetch workers are disabled in deterministic mode")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce_value(tp: Any, value: Any, key: str) -> Any:
    origin, args = get_origin(tp), get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        (inner, ) = [a for a in args if a is not type(None)]
        return _coerce_value(inner, value, key)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return [_coerce_value(args[0], v, key) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        # yaml reads exponent literals such as 1e-3 as strings
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {value!r}")
    if tp is str and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _coerce(f: dataclasses.Field, value: Any, key: str) -> Any:
    return _coerce_value(f.type, value, key)


def _from_dict(cls: Type[_C], data: Dict[str, Any], prefix: str="") -> _C:
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{prefix}{key}", "unknown config key")
        factory = fields[key].default_factory
        if isinstance(factory, type) and dataclasses.is_dataclass(factory):
            kwargs[key] = _from_dict(factory, value or {}, prefix=f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(fields[key], value, f"{prefix}{key}")
    return cls(**kwargs)


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    config = _from_dict(RunConfig, data or {})
    config.validate()
    return config


def load_run_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError("config", f"{path} does not exist")
    return run_config_from_dict(load_yaml_file(path))


def save_run_config(config: RunConfig, path: str):
    save_yaml_file(config.to_dict(), path, sort_keys=False)


def configure_runtime(num_threads: int=1, deterministic: bool=True):
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(deterministic)
    LOGGER.debug(f"torch threads={num_threads}, deterministic={deterministic}")
