"""Run configuration: dataclass tree, JSON loading, named RNG streams.

A run is fully described by one RunConfig; loading the same JSON and seed
reproduces the run bit for bit. Validation errors carry the dotted field
path so a bad config fails fast with a usable message.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .netsim import MB

PROTOCOLS = ("pirate", "learningchain")
AGGREGATOR_KINDS = ("mean", "krum", "multi-krum", "l-nearest", "detection-weighted")
ADVERSARY_KINDS = ("none", "harmful-gradient", "omniscient-craft",
                   "falsify-partial-aggregation", "withhold",
                   "equivocate-leader", "contaminate-model")
TASK_KINDS = ("least-squares", "logistic")
FANOUTS = ("member-parallel", "leader-serial")

# Stable identifiers for independent random streams spawned off the run seed.
STREAM_IDS = {
    "uplinks": 0,
    "task-data": 1,
    "committees": 2,
    "adversary": 3,
    "lottery": 4,
    "churn": 5,
    "fallback-query": 6,
    "batch": 7,
    "admission": 8,
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible generator for one named purpose."""
    return np.random.default_rng(np.random.SeedSequence((seed, STREAM_IDS[name])))


@dataclass(frozen=True)
class NetworkConfig:
    uplink_mbps_min: float = 80.0
    uplink_mbps_max: float = 240.0
    downlink_mbps: float = 1000.0
    latency_ms: float = 10.0


@dataclass(frozen=True)
class TrainingConfig:
    task: str = "least-squares"
    dimension: int = 8
    samples_per_node: int = 32
    noise_std: float = 0.1
    sharding: str = "iid"            # "iid" | "by-label"
    learning_rate: Optional[float] = None   # None picks a stable rate
    compute_time_s: float = 100.0
    batch_size: Optional[int] = None


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "detection-weighted"
    f: int = 0
    m: int = 1
    l: Optional[int] = None
    detection_threshold: float = 3.0


@dataclass(frozen=True)
class ConsensusConfig:
    timeout_factor: float = 4.0
    control_bytes: int = 2048
    gst_s: float = 0.0
    pre_gst_timeout_scale: float = 1.0
    handoff_fanout: str = "member-parallel"
    gradients_per_step: Optional[int] = None  # None -> max(1, round(c^2/n))


@dataclass(frozen=True)
class AdversaryConfig:
    count: int = 0
    strategy: str = "none"
    magnitude: float = 1.0
    target_kind: str = "aggregate"
    target_vector: Optional[tuple[float, ...]] = None
    noise_scale: float = 0.01
    omniscient_grant: bool = False
    contaminate_at_iteration: int = 0


@dataclass(frozen=True)
class ShardingConfig:
    reconfigure_every: int = 50
    churn_rate: float = 0.0
    credit_floor: float = 0.2
    credit_window: int = 3
    admission_threshold: float = 0.5
    k_evict: int = 1


@dataclass(frozen=True)
class RunConfig:
    nodes: int
    committee_size: int
    iterations: int
    seed: int = 0
    protocol: str = "pirate"
    payload_mb: float = 28.0
    mining_delay_s: float = 0.0          # learningchain only
    l_fraction: float = 0.7              # learningchain screening share
    horizon_s: Optional[float] = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    sharding: ShardingConfig = field(default_factory=ShardingConfig)

    @property
    def payload_bytes(self) -> int:
        return int(round(self.payload_mb * MB))

    @property
    def committees(self) -> int:
        return self.nodes // self.committee_size

    def gradients_per_step(self) -> int:
        if self.consensus.gradients_per_step is not None:
            return self.consensus.gradients_per_step
        return max(1, int(round(self.committee_size ** 2 / self.nodes)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


_SECTIONS = {
    "network": NetworkConfig,
    "training": TrainingConfig,
    "aggregator": AggregatorConfig,
    "consensus": ConsensusConfig,
    "adversary": AdversaryConfig,
    "sharding": ShardingConfig,
}

_CHOICE_FIELDS = {
    "protocol": PROTOCOLS,
    "training.task": TASK_KINDS,
    "training.sharding": ("iid", "non-iid-by-label"),
    "aggregator.kind": AGGREGATOR_KINDS,
    "adversary.strategy": ADVERSARY_KINDS,
    "adversary.target_kind": ("aggregate", "params"),
    "consensus.handoff_fanout": FANOUTS,
}


def _build_section(cls, data: dict, path: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in field_names:
            raise ConfigError(f"{path}{key}", "unknown field")
    coerced = dict(data)
    if "target_vector" in coerced and coerced["target_vector"] is not None:
        coerced["target_vector"] = tuple(float(x) for x in coerced["target_vector"])
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(path.rstrip("."), str(exc)) from exc


def load_config(data: dict) -> RunConfig:
    """Build and validate a RunConfig from plain JSON data."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in top_fields:
            raise ConfigError(key, "unknown field")

    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        if name in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(name, "must be an object")
            kwargs[name] = _build_section(_SECTIONS[name], value, f"{name}.")
        else:
            kwargs[name] = value

    for required in ("nodes", "committee_size", "iterations"):
        if required not in kwargs:
            raise ConfigError(required, "required field is missing")

    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError("", str(exc)) from exc
    validate_config(cfg)
    return cfg


def load_config_file(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(path, f"invalid JSON: {exc}") from exc
    return load_config(data)


def validate_config(cfg: RunConfig) -> None:
    def need(cond: bool, path: str, msg: str) -> None:
        if not cond:
            raise ConfigError(path, msg)

    need(cfg.nodes >= 1, "nodes", "must be >= 1")
    need(cfg.committee_size >= 1, "committee_size", "must be >= 1")
    need(cfg.iterations >= 1, "iterations", "must be >= 1")
    need(cfg.payload_mb > 0, "payload_mb", "must be > 0")
    need(cfg.seed >= 0, "seed", "must be >= 0")

    flat = cfg.to_dict()
    for path, choices in _CHOICE_FIELDS.items():
        node: Any = flat
        for part in path.split("."):
            node = node[part]
        need(node in choices, path, f"must be one of {choices}")

    if cfg.protocol == "pirate":
        need(cfg.nodes % cfg.committee_size == 0, "committee_size",
             "must divide nodes for the sharded protocol")
        need(cfg.committee_size >= 2, "committee_size",
             "sharded consensus needs committees of at least 2")
    need(cfg.network.uplink_mbps_min > 0, "network.uplink_mbps_min", "must be > 0")
    need(cfg.network.uplink_mbps_max >= cfg.network.uplink_mbps_min,
         "network.uplink_mbps_max", "must be >= uplink_mbps_min")
    need(cfg.network.downlink_mbps > 0, "network.downlink_mbps", "must be > 0")
    need(cfg.network.latency_ms >= 0, "network.latency_ms", "must be >= 0")
    need(cfg.training.dimension >= 1, "training.dimension", "must be >= 1")
    need(cfg.training.samples_per_node >= 1, "training.samples_per_node",
         "must be >= 1")
    need(cfg.training.compute_time_s >= 0, "training.compute_time_s",
         "must be >= 0")
    need(cfg.aggregator.f >= 0, "aggregator.f", "must be >= 0")
    need(cfg.aggregator.m >= 1, "aggregator.m", "must be >= 1")
    need(cfg.aggregator.detection_threshold > 0,
         "aggregator.detection_threshold", "must be > 0")
    if cfg.aggregator.l is not None:
        need(cfg.aggregator.l >= 1, "aggregator.l", "must be >= 1")
    need(cfg.consensus.timeout_factor > 0, "consensus.timeout_factor",
         "must be > 0")
    need(cfg.consensus.control_bytes >= 1, "consensus.control_bytes",
         "must be >= 1")
    if cfg.consensus.gradients_per_step is not None:
        need(cfg.consensus.gradients_per_step >= 1,
             "consensus.gradients_per_step", "must be >= 1")
    need(0 <= cfg.adversary.count < cfg.nodes, "adversary.count",
         "must be in [0, nodes)")
    if cfg.adversary.count > 0:
        need(cfg.adversary.strategy != "none", "adversary.strategy",
             "required when adversary.count > 0")
    if (cfg.adversary.strategy == "omniscient-craft"
            and cfg.adversary.omniscient_grant):
        # without a grant the crafter degrades to harmful-gradient and
        # needs no target; with one, both steering modes require it
        need(cfg.adversary.target_vector is not None,
             "adversary.target_vector", "required for a granted crafter")
    need(0.0 < cfg.l_fraction <= 1.0, "l_fraction", "must be in (0, 1]")
    need(cfg.mining_delay_s >= 0, "mining_delay_s", "must be >= 0")
    need(cfg.sharding.reconfigure_every >= 1, "sharding.reconfigure_every",
         "must be >= 1")
    need(0.0 <= cfg.sharding.churn_rate < 1.0, "sharding.churn_rate",
         "must be in [0, 1)")
    need(cfg.sharding.credit_window >= 1, "sharding.credit_window",
         "must be >= 1")
    if cfg.horizon_s is not None:
        need(cfg.horizon_s > 0, "horizon_s", "must be > 0")
