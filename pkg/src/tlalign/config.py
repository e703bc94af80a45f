"""Run configuration: flat ``section.key = value`` text files.

Example::

    # desk preset
    model.depth = 4
    train.tl_align = true
    data.source = mnist
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import TrainConfig
from .vit import ModelConfig

DEFAULT_MNIST_DIR = "data/mnist"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "mnist"              # mnist | synth
    mnist_dir: str = DEFAULT_MNIST_DIR
    train_size: int = 10000
    test_size: int = 2000
    synth_per_class: int = 200
    synth_noise: float = 0.1

    def __post_init__(self):
        if self.source not in ("mnist", "synth"):
            raise ValueError(f"data.source must be mnist or synth, got {self.source!r}")
        if self.train_size < 1 or self.test_size < 1 or self.synth_per_class < 1:
            raise ValueError("dataset sizes must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    diag_samples: int = 8

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"seed": 3})``."""
        kw = {}
        for name, updates in sections.items():
            if name in ("out_dir", "diag_samples"):
                kw[name] = updates
            else:
                kw[name] = dataclasses.replace(getattr(self, name), **updates)
        return dataclasses.replace(self, **kw)


_SECTIONS = ("model", "train", "data", "run")
_RUN_FIELDS = {"out_dir": str, "diag_samples": int}


def _section_fields(section: str) -> dict[str, type]:
    if section == "run":
        return _RUN_FIELDS
    cls = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}[section]
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(cls)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, kind: type, where: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "on", "yes", "1"):
            return True
        if low in ("false", "off", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        key, raw = (p.strip() for p in body.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{where}: key {key!r} must look like section.key")
        section, name = key.split(".")
        if section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        fields = _section_fields(section)
        if name not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[section][name] = _coerce(raw, fields[name], where)
    try:
        return RunConfig(ModelConfig(**values["model"]), TrainConfig(**values["train"]),
                         DataConfig(**values["data"]), **values["run"])
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    for name in _RUN_FIELDS:
        lines.append(f"run.{name} = {_format(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(), str(path))
    if check_paths and cfg.data.source == "mnist" and not Path(cfg.data.mnist_dir).is_dir():
        raise ConfigError(f"{path}: data.mnist_dir {cfg.data.mnist_dir!r} does not exist")
    return cfg
