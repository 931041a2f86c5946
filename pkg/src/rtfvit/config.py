"""Flat ``section.key=value`` text configs for experiments and ablation grids.

A single file fully determines a run, e.g.::

    model.depth=8
    model.local_fraction=0.75
    fusion.strategy=concat
    fusion.rtf=true
    train.lr=0.001
    task.kind=xor
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import TaskSpec
from .errors import ConfigError
from .fusion import FusionStrategy
from .train import Grid, TrainConfig
from .vit import ModelConfig


@dataclass
class FusionSettings:
    strategy: str = "concat"
    rtf: bool = True


@dataclass
class RunSettings:
    input_view: str = "both"
    scale: str = "custom"
    workers: int = 1


@dataclass
class DataSettings:
    path: str = ""


@dataclass
class GridSettings:
    strategies: tuple = ("average", "clscat", "concat")
    rtf: tuple = (False, True)
    split_fractions: tuple = (0.25, 0.5, 0.75)
    scales: tuple = ("custom",)
    seeds: tuple = ()

    def to_grid(self) -> Grid:
        return Grid(self.strategies, self.rtf, self.split_fractions, self.scales)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    task: TaskSpec = field(default_factory=TaskSpec)
    data: DataSettings = field(default_factory=DataSettings)
    run: RunSettings = field(default_factory=RunSettings)
    grid: GridSettings = field(default_factory=GridSettings)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.train.validate()
        try:
            self.fusion.strategy = FusionStrategy.parse(self.fusion.strategy).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.run.input_view not in ("both", "view1", "view2"):
            raise ConfigError(f"run.input_view must be both, view1 or view2, got {self.run.input_view!r}")
        return self


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))
# sections archived with a single training run
RUN_SECTIONS = ("model", "train", "fusion", "task", "data", "run")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, current, hint: str):
    text = text.strip()
    if isinstance(current, bool):
        return parse_bool(text)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if hint == "rtf":
            return tuple(parse_bool(t) for t in items)
        if hint in ("split_fractions", "betas"):
            return tuple(float(t) for t in items)
        if hint == "seeds":
            return tuple(int(t) for t in items)
        return tuple(items)
    return text


def to_text(cfg: ExperimentConfig, sections=RUN_SECTIONS) -> str:
    lines = []
    for name in sections:
        section = getattr(cfg, name)
        for f in fields(section):
            lines.append(f"{name}.{f.name}={_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def apply_text(cfg: ExperimentConfig, text: str) -> ExperimentConfig:
    """Override fields of ``cfg`` (in place) from key-value lines."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        set_value(cfg, key, value)
    return cfg


def set_value(cfg: ExperimentConfig, key: str, value: str) -> None:
    if "." not in key:
        raise ConfigError(f"key {key!r} must look like section.name")
    section_name, name = key.split(".", 1)
    if section_name not in SECTIONS:
        raise ConfigError(f"unknown section {section_name!r} in {key!r}")
    section = getattr(cfg, section_name)
    if name not in {f.name for f in fields(section)}:
        raise ConfigError(f"unknown key {key!r}")
    try:
        setattr(section, name, _coerce(value, getattr(section, name), name))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return apply_text(ExperimentConfig(), path.read_text())


def from_text(text: str) -> ExperimentConfig:
    return apply_text(ExperimentConfig(), text)


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return dataclasses.replace(
        cfg, **{name: dataclasses.replace(getattr(cfg, name)) for name in SECTIONS}
    )


__all__ = [
    "DataSettings", "ExperimentConfig", "FusionSettings", "GridSettings", "RunSettings",
    "apply_text", "copy_config", "from_text", "load_config", "parse_bool", "set_value", "to_text",
]
