"""TOML run configuration.

One file may hold any of these tables; missing tables and keys take the
dataclass defaults::

    [trace]        # TraceConfig: world generation
    n_cameras = 20
    seed = 0

    [extractor]    # ExtractorConfig: frozen surrogate features
    d_feat = 32

    [bank]
    strategy = "top_k:1"
    capacity = 8500

    [pretrain]     # TrainParams for the single-frame classifier phase
    [train]        # TrainParams for the context-model phase

    [model]
    temperature = 0.01
    window = 3
    attention_init = "identity"

    [bench]
    seeds = [1]    # fine-tuning seeds; benchmark rows report the mean over them
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attention import DEFAULT_TEMPERATURE
from .membank import CurationStrategy
from .synthcam.extractor import ExtractorConfig
from .synthcam.pipeline import TrainParams
from .synthcam.world import ConfigError, TraceConfig


def dataclass_from_mapping(cls, values: Mapping[str, Any], table: str = ""):
    """Build a dataclass from a mapping, rejecting unknown keys and coercing to the default's type."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    where = f"[{table}] " if table else ""
    if unknown:
        raise ConfigError(f"{where}unknown keys: {', '.join(unknown)}")
    out = {}
    for k, v in values.items():
        default = known[k].default
        if default is dataclasses.MISSING or default is None or isinstance(v, type(default)):
            out[k] = v
        elif isinstance(default, bool) or isinstance(v, bool):
            raise ConfigError(f"{where}{k} must be {type(default).__name__}, got {v!r}")
        else:
            try:
                out[k] = type(default)(v)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}{k} must be {type(default).__name__}, got {v!r}") from None
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{exc}") from None


@dataclass(frozen=True)
class ModelConfig:
    temperature: float = DEFAULT_TEMPERATURE
    window: int = 3
    attention_init: str = "identity"
    causal: bool = False


@dataclass(frozen=True)
class BankConfig:
    strategy: str = "top_k:1"
    capacity: int = 8500

    @property
    def curation(self) -> CurationStrategy:
        return CurationStrategy.parse(self.strategy)


@dataclass(frozen=True)
class BenchConfig:
    seeds: tuple = (1,)

    def __post_init__(self):
        if not self.seeds or not all(isinstance(v, int) and not isinstance(v, bool) for v in self.seeds):
            raise ValueError(f"seeds must be a non-empty list of integers, got {self.seeds!r}")


PRETRAIN_DEFAULTS = TrainParams(steps=400, learning_rate=1.0)
TRAIN_DEFAULTS = TrainParams(steps=200, learning_rate=0.1, seed=1)


@dataclass(frozen=True)
class RunConfig:
    trace: TraceConfig = field(default_factory=TraceConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    pretrain: TrainParams = PRETRAIN_DEFAULTS
    train: TrainParams = TRAIN_DEFAULTS
    model: ModelConfig = field(default_factory=ModelConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "RunConfig":
        tables = {"trace": TraceConfig, "extractor": ExtractorConfig, "bank": BankConfig,
                  "pretrain": TrainParams, "train": TrainParams, "model": ModelConfig,
                  "bench": BenchConfig}
        unknown = sorted(set(doc) - set(tables))
        if unknown:
            raise ConfigError(f"unknown config tables: {', '.join(unknown)}")
        base = cls()
        parts = {}
        for name, kind in tables.items():
            values = doc.get(name, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f"[{name}] must be a table")
            merged = {**dataclasses.asdict(getattr(base, name)), **values}
            parts[name] = dataclass_from_mapping(kind, merged, name)
        try:
            parts["bank"].curation
        except ValueError as exc:
            raise ConfigError(f"[bank] {exc}") from None
        return cls(**parts)


def load_config(path: Optional[str]) -> RunConfig:
    """Read a TOML config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_mapping(doc)


def shipped_config_path(name: str = "benchmark.toml") -> Path:
    return Path(__file__).with_name("data") / name
