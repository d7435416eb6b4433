"""Experiment configuration: one JSON document, six sections, strict keys."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .ctr import CtrConfig, TABLE3_VARIANTS
from .make import MakeConfig
from .scl import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_items: int = 2000
    n_clusters: int = 20
    d_lat: int = 8
    d_raw: int = 128
    zipf_exponent: float = 1.0
    noise_sigma: float = 0.05
    id_effect_sigma: float = 0.5
    id_content_share: float = 0.5
    n_triplets: int = 20000
    n_eval_triplets: int = 5000
    query_noise: float = 0.05
    negative_pool: int | None = None
    n_users: int = 2000
    n_records: int = 250000
    L_max: int = 50
    n_days: int = 5
    w_id: float = 1.0
    w_sem: float = 1.0
    bias: float = -3.3
    pref_concentration: float = 0.05
    p_target_preferred: float = 0.5
    cold_fraction: float = 0.0
    cold_train_scale: float = 0.1
    seed: int = 0


@dataclass
class MakeSection(MakeConfig):
    pass


@dataclass
class CtrSection(CtrConfig):
    variants: tuple[str, ...] = TABLE3_VARIANTS
    sweep_epochs: int = 4
    sweep_variants: tuple[str, ...] = ("id_base", "mm_only")
    make_epoch_grid: tuple[int, ...] = (0, 1, 2, 4)

    def __post_init__(self):
        super().__post_init__()
        self.variants = tuple(self.variants)
        self.sweep_variants = tuple(self.sweep_variants)
        self.make_epoch_grid = tuple(self.make_epoch_grid)

    def model_config(self) -> CtrConfig:
        names = {f.name for f in fields(CtrConfig)}
        return CtrConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class EvalConfig:
    acc_n: tuple[int, ...] = (1, 5)
    n_buckets: int = 8

    def __post_init__(self):
        self.acc_n = tuple(self.acc_n)


@dataclass
class PipelineConfig:
    n_workers: int = 2
    queue_capacity: int = 64
    encode_delay: float = 0.005
    history: int = 4
    host: str = "127.0.0.1"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    make: MakeSection = field(default_factory=MakeSection)
    ctr: CtrSection = field(default_factory=CtrSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def seed(self) -> int:
        return self.data.seed


SECTIONS = {f.name: f.default_factory for f in fields(ExperimentConfig)}


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, factory in SECTIONS.items():
        parts[name] = _build(type(factory()), doc.get(name, {}), name)
    return ExperimentConfig(**parts)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """``section.key=value`` assignments; values parse as JSON, falling back to strings."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        path, sep, raw = item.partition("=")
        section, dot, key = path.partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[key] = value
    return doc


def load(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(apply_overrides(doc, overrides or []))
