"""Experiment configuration: a YAML key-value tree with a stable content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .client import HyperParams
from .data import SyntheticSpec
from .detection import CALIBRATION_SOURCES, EVAL_MODES, ThresholdPolicy

GRID_KEYS = ("alpha", "beta", "mu", "nu", "rank")


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class DataConfig:
    """Either CSV paths plus a schema, or a synthetic generator spec."""

    train: str | None = None
    test: str | None = None
    schema: str | None = None
    synthetic: dict | None = None
    partition_mode: str = "contiguous"
    validation_fraction: float = 0.1

    @property
    def is_synthetic(self) -> bool:
        return self.train is None

    def synthetic_spec(self, d: int, seed: int) -> SyntheticSpec:
        spec = dict(self.synthetic or {})
        spec.update(d=d, seed=seed)
        return SyntheticSpec(**spec)


@dataclass
class ExperimentConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    data: DataConfig = field(default_factory=DataConfig)
    d: int = 5
    partition_key: str = "dst_bytes"
    eval_mode: str = "personalized"
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    calibration: str = "purified"
    seed: int = 0
    out_dir: str = "fedep_out"
    ranks: list[int] = field(default_factory=lambda: [1, 3, 5, 8, 10])
    grid: dict = field(default_factory=lambda: {"alpha": [0.1, 0.5], "beta": [0.0, 0.02]})
    client_counts: list[int] = field(default_factory=lambda: [2, 4, 8])
    bench_rounds: int = 3
    bench_repeats: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be at least 1")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if self.calibration not in CALIBRATION_SOURCES:
            raise ConfigError(f"calibration must be one of {CALIBRATION_SOURCES}")
        bad = set(self.grid) - set(GRID_KEYS)
        if bad:
            raise ConfigError(f"grid keys must be among {GRID_KEYS}, got {sorted(bad)}")
        if self.bench_repeats < 1 or self.bench_rounds < 1:
            raise ConfigError("bench_rounds and bench_repeats must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        try:
            if "hp" in raw:
                raw["hp"] = HyperParams.from_dict(raw["hp"] or {})
            if "data" in raw:
                raw["data"] = DataConfig(**(raw["data"] or {}))
            if "threshold" in raw:
                raw["threshold"] = ThresholdPolicy(**(raw["threshold"] or {}))
            return cls(**raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {e}") from e
        return cls.from_dict(raw or {})

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            return cls.from_yaml(text)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from e

    def hash(self) -> str:
        """SHA-256 prefix over everything that affects results (out_dir excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
