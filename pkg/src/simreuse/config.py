"""Run configuration for the command-line front end.

A config file is a JSON object with a `schema` version and one section per
concern.  Every section is a dataclass; unknown keys anywhere are rejected so
that typos fail fast instead of silently falling back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .models import ARCHS
from .regularizers import ConfigError, RegConfig
from .training import TrainConfig
from .tuner import TuneBudget

SCHEMA_VERSION = 1
SWEEP_PARAMS = ("window", "lam_t", "lam")


@dataclass
class StreamSpec:
    """Either an RFS1 file or parameters for a synthetic stream (seed = run seed + offset)."""

    path: str | None = None
    n_frames: int = 256
    shape: list = field(default_factory=lambda: [16, 16, 1])
    rho: float = 0.95
    n_classes: int = 2
    amplitude: float = 1.0
    brightness: float = 0.0
    seed_offset: int = 0

    def __post_init__(self):
        if self.path is None:
            if self.n_frames < 1:
                raise ConfigError("stream.n_frames must be >= 1")
            if len(self.shape) != 3 or min(self.shape) < 1:
                raise ConfigError(f"stream.shape must be [H, W, C], got {self.shape}")
            if not 0.0 <= self.rho <= 1.0:
                raise ConfigError(f"stream.rho must lie in [0, 1], got {self.rho}")
            if self.n_classes < 1:
                raise ConfigError("stream.n_classes must be >= 1")
        self.shape = [int(s) for s in self.shape]


@dataclass
class ModelSpec:
    arch: str = "tiny_conv"
    hash_size: int = 12
    input_dim: int = 8
    checkpoint: str | None = None
    tuning: str | None = None
    weight_by_count: bool = False

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {self.arch!r}")
        if not 1 <= self.hash_size <= 64:
            raise ConfigError("model.hash_size must lie in [1, 64]")
        if self.input_dim < 1:
            raise ConfigError("model.input_dim must be >= 1")


@dataclass
class TrainSpec:
    pretrain_epochs: int = 10
    sa_epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    reuse_in_training: bool = True

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.sa_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        try:
            self.train_config(0)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def train_config(self, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(self.lr, self.momentum, self.pretrain_epochs if epochs is None else epochs,
                           self.batch_size, seed, self.reuse_in_training)


@dataclass
class TuneSpec:
    n_init: int = 5
    n_total: int = 30
    workers: int | None = None

    def __post_init__(self):
        try:
            self.budget()
        except ValueError as exc:
            raise ConfigError(f"tune: {exc}") from exc
        if self.workers is not None and self.workers < 1:
            raise ConfigError("tune.workers must be >= 1")

    def budget(self) -> TuneBudget:
        return TuneBudget(self.n_init, self.n_total)


@dataclass
class BenchSpec:
    checkpoints: list = field(default_factory=list)
    quantize: bool = False
    batch_size: int = 16
    hash_size: int | None = None
    input_dim: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("bench.batch_size must be >= 1")
        if self.hash_size is not None and not 1 <= self.hash_size <= 64:
            raise ConfigError("bench.hash_size must lie in [1, 64]")


@dataclass
class AnalyzeSpec:
    max_frames: int = 64
    profile_frames: int = 32
    lags: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])

    def __post_init__(self):
        if self.max_frames < 2:
            raise ConfigError("analyze.max_frames must be >= 2")
        if self.profile_frames < 1:
            raise ConfigError("analyze.profile_frames must be >= 1")
        if not self.lags or min(self.lags) < 1:
            raise ConfigError("analyze.lags must be positive")


@dataclass
class SweepSpec:
    param: str = "window"
    values: list = field(default_factory=lambda: [1, 2, 4])

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep.param must be one of {SWEEP_PARAMS}")
        if not self.values:
            raise ConfigError("sweep.values must not be empty")


SECTIONS = {
    "stream": StreamSpec,
    "eval_stream": StreamSpec,
    "model": ModelSpec,
    "train": TrainSpec,
    "reg": RegConfig,
    "tune": TuneSpec,
    "bench": BenchSpec,
    "analyze": AnalyzeSpec,
    "sweep": SweepSpec,
}


@dataclass
class RunConfig:
    seed: int = 0
    stream: StreamSpec = field(default_factory=StreamSpec)
    eval_stream: StreamSpec = field(default_factory=lambda: StreamSpec(seed_offset=100))
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    reg: RegConfig = field(default_factory=RegConfig)
    tune: TuneSpec = field(default_factory=TuneSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    analyze: AnalyzeSpec = field(default_factory=AnalyzeSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA_VERSION, "seed": self.seed}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if isinstance(sec, RegConfig) else dataclasses.asdict(sec)
        return out

    def hash(self) -> str:
        """Short digest of the canonical JSON form; embedded in every output."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


def _section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    schema = data.get("schema")
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {schema!r}, expected {SCHEMA_VERSION}")
    unknown = sorted(set(data) - set(SECTIONS) - {"schema", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(cls, data[name], name) for name, cls in SECTIONS.items() if name in data}
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return RunConfig(seed=seed, **kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
