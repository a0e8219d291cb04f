"""Run configuration and its TOML representation.

A config file holds one ``[stage.<name>]`` table per stage; any key that is
not a :class:`RunConfig` field is rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError
from .losses import LossWeights

STAGES = (
    "make_synthetic",
    "train_source",
    "adapt_target",
    "init_generator",
    "train_sfit",
    "finetune",
    "evaluate",
)

DEFAULT_EPOCHS = {
    "make_synthetic": 0,
    "train_source": 5,
    "adapt_target": 5,
    "init_generator": 2,
    "train_sfit": 10,
    "finetune": 2,
    "evaluate": 0,
}


@dataclass
class RunConfig:
    stage: str
    epochs: int = -1  # -1 selects the stage default
    batch_size: int = 16
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # loss weights for train_sfit
    w_kd: float = 1.0
    w_rp: float = 1.0
    w_style: float = 0.0
    w_batch: float = 0.0
    w_pixel: float = 0.0
    w_bn: float = 0.0
    kd_temperature: float = 1.0
    # adapt_target
    adapt_method: str = "im"
    mmd_weight: float = 1.0
    # make_synthetic
    base_images: str = ""  # empty: bundled MNIST subset
    base_labels: str = ""
    source_transform: str = "identity"
    target_transform: str = "invert"
    split_seed: int = 0
    train_fraction: float = 0.8
    # paths; empty strings fall back to the layout under `out`
    data: str = ""
    source_ckpt: str = ""
    target_ckpt: str = ""
    generator_ckpt: str = ""
    out: str = "run"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if self.epochs == -1:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be > 0, got {self.batch_size}")
        if self.adapt_method not in ("im", "mmd"):
            raise ConfigError(f"adapt_method must be 'im' or 'mmd', got {self.adapt_method!r}")
        try:
            self.weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_kd, self.w_rp, self.w_style, self.w_batch, self.w_pixel, self.w_bn)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_table(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "stage"}


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "stage"}


def _coerce(name, value):
    kind = type(_FIELDS[name].default)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"{name} must be {kind.__name__}, got {value!r}")
    return value


def config_from_table(stage: str, table: dict) -> RunConfig:
    unknown = sorted(set(table) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"[stage.{stage}]: unknown keys {unknown}")
    return RunConfig(stage=stage, **{k: _coerce(k, v) for k, v in table.items()})


def parse_config(text: str) -> dict[str, RunConfig]:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    extra = sorted(set(doc) - {"stage"})
    if extra:
        raise ConfigError(f"unknown top-level tables {extra}; use [stage.<name>]")
    stages = doc.get("stage", {})
    return {name: config_from_table(name, table) for name, table in stages.items()}


def load_config(path) -> dict[str, RunConfig]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(*configs: RunConfig) -> str:
    return tomli_w.dumps({"stage": {c.stage: c.to_table() for c in configs}})
