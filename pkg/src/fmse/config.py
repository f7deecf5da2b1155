"""Strict run configuration: defaults < config file < command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, FMSEError
from .objectives import PrecondConfig
from .path import PathConfig
from .sampler import SamplerConfig
from .spectral import SpectralConfig
from .trainer import TrainConfig

CONFIG_ENV = "FMSE_CONFIG"


@dataclass
class ModelConfig:
    name: str = "reference"
    channels: int = 32
    depth: int = 2
    emb_dim: int = 64
    input_skip: bool = False
    # external backbones: "package.module:attr" built with ``kwargs``
    target: str | None = None
    kwargs: dict = field(default_factory=dict)

    def spec(self) -> dict:
        spec = asdict(self)
        if self.name == "external":
            return {"name": "external", "target": self.target, "kwargs": self.kwargs}
        del spec["target"], spec["kwargs"]
        return spec


@dataclass
class DataConfig:
    root: str | None = None
    layout: str = "voicebank"


SECTIONS = {
    "train": TrainConfig,
    "path": PathConfig,
    "precond": PrecondConfig,
    "spectral": SpectralConfig,
    "sampler": SamplerConfig,
    "model": ModelConfig,
    "data": DataConfig,
}
SCALARS = {"metrics": ["SI-SDR"], "val_metric": "SI-SDR", "output_dir": "runs"}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    path: PathConfig = field(default_factory=PathConfig)
    precond: PrecondConfig = field(default_factory=PrecondConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: list = field(default_factory=lambda: ["SI-SDR"])
    val_metric: str = "SI-SDR"
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:8]


def defaults() -> dict:
    return RunConfig().to_dict()


# mappings whose keys are passed through unchecked
FREEFORM = {"model.kwargs"}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = dict(base)
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a mapping")
            out[key] = dict(value) if dotted in FREEFORM else _merge(base[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def _parse_value(raw: str):
    # JSON first: YAML 1.1 reads "3e-3" as a string
    try:
        return json.loads(raw)
    except ValueError:
        return yaml.safe_load(raw)


def parse_override(item: str) -> dict:
    """``"train.max_steps=100"`` -> ``{"train": {"max_steps": 100}}`` (value parsed as YAML)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.sub=value")
    key, raw = item.split("=", 1)
    value = _parse_value(raw) if raw != "" else None
    node: dict = {}
    cursor = node
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    return node


def load_file(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def build(doc: dict) -> RunConfig:
    merged = _merge(defaults(), doc)
    kwargs = {}
    for name, cls in SECTIONS.items():
        try:
            kwargs[name] = cls(**merged[name])
        except (TypeError, FMSEError, ValueError) as exc:
            raise ConfigError(f"invalid '{name}' section: {exc}") from exc
    for name in SCALARS:
        kwargs[name] = merged[name]
    if not isinstance(kwargs["metrics"], list):
        raise ConfigError("'metrics' must be a list")
    return RunConfig(**kwargs)


def resolve(config_path=None, overrides=()) -> RunConfig:
    """Resolve the run configuration.

    ``config_path`` falls back to ``$FMSE_CONFIG``; each override is either a
    ``key.sub=value`` string or an already nested mapping.
    """
    if config_path is None:
        config_path = os.environ.get(CONFIG_ENV) or None
    doc = load_file(config_path) if config_path else {}
    merged = _merge(defaults(), doc)
    for item in overrides:
        merged = _merge(merged, parse_override(item) if isinstance(item, str) else item)
    return build(merged)


def replace_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
