"""Experiment configuration: dataclasses, JSON parsing, defaults, round-tripping."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .dataplane import PartitionScheme
from .errors import (
    ConfigError,
    ConfigInvariantError,
    ConfigSyntaxError,
    ContractViolation,
    UnknownKeyError,
)
from .models import ModelSpec
from .optim import LocalOptConfig, ServerOptConfig

ALGORITHMS = ("fedavg", "adaalter", "prefed", "basic_prefed", "fedadagrad", "fedadam", "prefedopt")
DATA_SOURCES = ("blobs", "quadratic", "file")

# Hyperparameter defaults per algorithm. Values stated in the experimental
# protocol: FedAvg local SGD 0.05 with momentum 0.9; Adam-style beta1=0.9,
# beta2=0.99, tau=1e-3 and local rate 1e-3 for AdaAlter/FedAdam; beta2=0.9 for
# PreFed/PreFedOpt; server rate 0.05. Everything else is chosen to match.
ALGORITHM_DEFAULTS: dict[str, dict[str, dict]] = {
    "fedavg": {
        "local_opt": {"kind": "sgd_momentum", "eta_l": 0.05, "momentum": 0.9},
        "server_opt": {"kind": "average"},
    },
    "adaalter": {
        "local_opt": {"kind": "adaalter", "eta_l": 1e-3, "tau": 1e-3},
        "server_opt": {"kind": "average"},
    },
    "prefed": {
        "local_opt": {"kind": "prefed", "eta_l": 1e-3, "beta1": 0.9, "beta2": 0.9, "tau": 1e-3},
        "server_opt": {"kind": "average"},
    },
    "basic_prefed": {
        "local_opt": {"kind": "basic_prefed", "eta_l": 1e-3, "tau": 1e-3},
        "server_opt": {"kind": "average"},
    },
    "fedadagrad": {
        "local_opt": {"kind": "sgd", "eta_l": 1e-3},
        "server_opt": {"kind": "fedadagrad", "eta_g": 0.05, "tau": 1e-3, "delta_normalization": "sum_only"},
    },
    "fedadam": {
        "local_opt": {"kind": "sgd", "eta_l": 1e-3},
        "server_opt": {"kind": "fedadam", "eta_g": 0.05, "beta1": 0.9, "beta2": 0.99, "tau": 1e-3},
    },
    "prefedopt": {
        "local_opt": {"kind": "sgd", "eta_l": 1e-3},
        "server_opt": {
            "kind": "prefedopt", "eta_g": 0.05, "beta1": 0.9, "beta2": 0.9, "tau": 1e-3,
            "delta_normalization": "divide_by_K",
        },
    },
}

# local optimizer kinds each algorithm may run
ALLOWED_LOCAL = {
    "fedavg": ("sgd", "sgd_momentum"),
    "adaalter": ("adaalter",),
    "prefed": ("prefed",),
    "basic_prefed": ("basic_prefed",),
    "fedadagrad": ("sgd", "sgd_momentum"),
    "fedadam": ("sgd", "sgd_momentum"),
    "prefedopt": ("sgd", "sgd_momentum"),
}


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    # blobs
    n: int = 1000
    spread: float = 1.0
    val_fraction: float = 0.2
    # quadratic testbed
    d: int = 10
    mu: float = 0.1
    L_q: float = 1.0
    hetero: float = 1.0
    noise_std: float = 0.0
    # file
    path: str | None = None
    val_path: str | None = None
    partition: PartitionScheme = field(default_factory=PartitionScheme)


@dataclass(frozen=True)
class LRSchedule:
    local_decay_factor: float = 0.1
    local_decay_every: int = 20
    server_decay_factor: float = 0.1
    server_decay_every: int = 40


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedavg"
    model: ModelSpec | None = None
    data: DataConfig = field(default_factory=DataConfig)
    num_clients: int = 10
    sample_fraction: float = 1.0
    rounds: int = 10
    local_steps: int = 5
    batch_size: int = 32
    local_opt: LocalOptConfig = field(default_factory=LocalOptConfig)
    server_opt: ServerOptConfig = field(default_factory=ServerOptConfig)
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    seed: int = 0
    eval_every: int = 1
    save_weights: bool = False

    @property
    def num_sampled(self) -> int:
        return math.ceil(self.num_clients * self.sample_fraction)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def _check_keys(raw: dict, cls, prefix: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigInvariantError(prefix.rstrip(".") or "config", "expected a JSON object")
    known = _fields(cls)
    for key in raw:
        if key not in known:
            raise UnknownKeyError(prefix + key)


def _build(cls, raw: dict, prefix: str):
    _check_keys(raw, cls, prefix)
    try:
        return cls(**raw)
    except (ContractViolation, ConfigError, TypeError) as exc:
        if isinstance(exc, ConfigInvariantError):
            raise
        raise ConfigInvariantError(prefix.rstrip(".") or "config", str(exc)) from exc


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigInvariantError(field_name, message)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping, apply defaults, and build the dataclasses."""
    _check_keys(raw, ExperimentConfig, "")
    raw = dict(raw)
    algorithm = raw.get("algorithm", "fedavg")
    _require(algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}, got {algorithm!r}")
    defaults = ALGORITHM_DEFAULTS[algorithm]

    local_raw = {**defaults["local_opt"], **raw.get("local_opt", {})}
    server_raw = {**defaults["server_opt"], **raw.get("server_opt", {})}
    local_opt = _build(LocalOptConfig, local_raw, "local_opt.")
    server_opt = _build(ServerOptConfig, server_raw, "server_opt.")
    _require(
        local_opt.kind in ALLOWED_LOCAL[algorithm],
        "local_opt.kind",
        f"{algorithm} runs {ALLOWED_LOCAL[algorithm]}, got {local_opt.kind!r}",
    )
    _require(
        server_opt.kind == defaults["server_opt"]["kind"],
        "server_opt.kind",
        f"{algorithm} uses server optimizer {defaults['server_opt']['kind']!r}",
    )

    data_raw = dict(raw.get("data", {}))
    _check_keys(data_raw, DataConfig, "data.")
    if "partition" in data_raw:
        data_raw["partition"] = _build(PartitionScheme, data_raw["partition"], "data.partition.")
    data = _build(DataConfig, data_raw, "data.")
    _require(data.source in DATA_SOURCES, "data.source", f"must be one of {DATA_SOURCES}")

    model = raw.get("model")
    if model is not None:
        model = _build(ModelSpec, model, "model.")
    if data.source == "quadratic":
        _require(model is None, "model", "the quadratic testbed takes no model section")
    else:
        _require(model is not None, "model", "required unless data.source is 'quadratic'")
    if data.source == "file":
        _require(bool(data.path), "data.path", "required for data.source 'file'")

    schedule = _build(LRSchedule, raw.get("lr_schedule", {}), "lr_schedule.")
    rest = {k: v for k, v in raw.items() if k not in ("local_opt", "server_opt", "data", "model", "lr_schedule")}
    rest["algorithm"] = algorithm
    cfg = _build(
        ExperimentConfig,
        {**rest, "model": model, "data": data, "local_opt": local_opt, "server_opt": server_opt, "lr_schedule": schedule},
        "",
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    _require(isinstance(cfg.num_clients, int) and cfg.num_clients >= 1, "num_clients", "must be >= 1")
    _require(0 < cfg.sample_fraction <= 1, "sample_fraction", "must lie in (0, 1]")
    _require(cfg.num_sampled >= 1, "sample_fraction", "selects no clients")
    _require(isinstance(cfg.rounds, int) and cfg.rounds >= 1, "rounds", "must be >= 1")
    _require(isinstance(cfg.local_steps, int) and cfg.local_steps >= 1, "local_steps", "must be >= 1")
    _require(isinstance(cfg.batch_size, int) and cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _require(isinstance(cfg.eval_every, int) and cfg.eval_every >= 1, "eval_every", "must be >= 1")
    _require(isinstance(cfg.seed, int) and 0 <= cfg.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
    _require(cfg.lr_schedule.local_decay_every >= 1, "lr_schedule.local_decay_every", "must be >= 1")
    _require(cfg.lr_schedule.server_decay_every >= 1, "lr_schedule.server_decay_every", "must be >= 1")
    if cfg.algorithm == "basic_prefed":
        _require(cfg.sample_fraction == 1, "sample_fraction", "basic_prefed needs full participation")
    d = cfg.data
    if d.source == "quadratic":
        _require(d.d >= 1, "data.d", "must be >= 1")
        _require(0 < d.mu <= d.L_q, "data.mu", "need 0 < mu <= L_q")
        _require(d.hetero >= 0, "data.hetero", "must be >= 0")
        _require(d.noise_std >= 0, "data.noise_std", "must be >= 0")
    if d.source == "blobs":
        _require(d.n >= cfg.model.num_classes, "data.n", "need at least one sample per class")
        _require(d.spread >= 0, "data.spread", "must be >= 0")
    _require(0 <= d.val_fraction < 1, "data.val_fraction", "must lie in [0, 1)")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def parse_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigSyntaxError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw)
