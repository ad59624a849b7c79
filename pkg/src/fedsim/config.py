"""Experiment configuration: TOML loading and schema validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .clients import ClientConfig
from .errors import ConfigError

STRATEGIES = ("fedavg", "fedprox", "laplace", "fedsparse", "fedl1", "feddrop",
              "median", "mog")


@dataclass
class DataCfg:
    source: str = "synth"  # synth | idx
    n_per_class: int = 150
    input_dim: int = 16
    num_classes: int = 4
    class_separation: float = 5.0
    seed: int = -1  # -1 means: use the experiment master seed
    images_path: str = ""
    labels_path: str = ""


@dataclass
class PartitionCfg:
    scheme: str = "dirichlet"  # dirichlet | single_class
    num_shards: int = 20
    alpha: float = 0.3
    test_fraction: float = 0.2


@dataclass
class ModelCfg:
    kind: str = "mlp"
    hidden_dim: int = 32
    grouping: str = ""
    init_scale: float = 1.0
    gate_output: bool = False


@dataclass
class ServerCfg:
    optimizer: str = "sgd"  # weight aggregation: sgd | adam | adamax
    lr: float = 1.0
    v_optimizer: str = "adamax"
    lr_thresholds: float = 1e-2
    prune_epsilon: float = 0.1
    theta0: float = 0.99
    temperature: float = 0.001
    mog_components: int = 2
    mog_lambda: float = 1.0


@dataclass
class ExperimentConfig:
    strategy: str = "fedavg"
    rounds: int = 10
    cohort: int = 10
    master_seed: int = 0
    eval_interval: int = 10
    jobs: int = 1
    name: str = ""
    data: DataCfg = field(default_factory=DataCfg)
    partition: PartitionCfg = field(default_factory=PartitionCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    client: ClientConfig = field(default_factory=ClientConfig)
    server: ServerCfg = field(default_factory=ServerCfg)


_SECTIONS = {
    "data": DataCfg,
    "partition": PartitionCfg,
    "model": ModelCfg,
    "client": ClientConfig,
    "server": ServerCfg,
}
_TOP_KEYS = ("strategy", "rounds", "cohort", "master_seed", "eval_interval",
             "jobs", "name")


def _coerce(section: str, key: str, value, target_type):
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, target_type):
        raise ConfigError(
            f"{section}.{key}: expected {target_type.__name__}, "
            f"got {type(value).__name__}"
        )
    return value


def _build_section(name: str, cls, table: dict):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    types = {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        kwargs[key] = _coerce(name, key, value, types[key])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    exp = dict(raw.get("experiment", {}))
    for key, value in exp.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"experiment.{key}: unknown key")
        current = getattr(cfg, key)
        setattr(cfg, key, _coerce("experiment", key, value, type(current)))
    for section, cls in _SECTIONS.items():
        table = raw.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"{section}: expected a table")
        setattr(cfg, section, _build_section(section, cls, table))
    for key in raw:
        if key not in ("experiment", *_SECTIONS):
            raise ConfigError(f"{key}: unknown table")
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def validate_config(cfg: ExperimentConfig):
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"experiment.strategy: unknown strategy "
                          f"{cfg.strategy!r} (choose from {STRATEGIES})")
    if cfg.rounds < 1:
        raise ConfigError("experiment.rounds: must be >= 1")
    if cfg.cohort < 1 or cfg.cohort > cfg.partition.num_shards:
        raise ConfigError("experiment.cohort: must lie in "
                          "[1, partition.num_shards]")
    if cfg.eval_interval < 1:
        raise ConfigError("experiment.eval_interval: must be >= 1")
    if cfg.jobs < 1:
        raise ConfigError("experiment.jobs: must be >= 1")

    if cfg.data.source not in ("synth", "idx"):
        raise ConfigError("data.source: must be 'synth' or 'idx'")
    if cfg.data.source == "idx" and not (cfg.data.images_path
                                         and cfg.data.labels_path):
        raise ConfigError("data: idx source needs images_path and labels_path")
    if cfg.data.source == "synth" and (cfg.data.n_per_class < 1
                                       or cfg.data.input_dim < 1
                                       or cfg.data.num_classes < 2):
        raise ConfigError("data: synth source needs n_per_class >= 1, "
                          "input_dim >= 1, num_classes >= 2")

    if cfg.partition.scheme not in ("dirichlet", "single_class"):
        raise ConfigError("partition.scheme: must be 'dirichlet' or "
                          "'single_class'")
    if cfg.partition.scheme == "dirichlet" and cfg.partition.alpha <= 0:
        raise ConfigError("partition.alpha: must be positive")
    if not 0.0 < cfg.partition.test_fraction < 1.0:
        raise ConfigError("partition.test_fraction: must lie inside (0, 1)")

    if cfg.model.kind not in ("logreg", "mlp"):
        raise ConfigError("model.kind: must be 'logreg' or 'mlp'")
    if cfg.model.kind == "mlp" and cfg.model.hidden_dim < 1:
        raise ConfigError("model.hidden_dim: must be >= 1 for mlp")
    if cfg.model.init_scale <= 0:
        raise ConfigError("model.init_scale: must be positive")

    if cfg.server.optimizer not in ("sgd", "adam", "adamax"):
        raise ConfigError("server.optimizer: must be sgd, adam or adamax")
    if cfg.server.v_optimizer not in ("sgd", "adam", "adamax"):
        raise ConfigError("server.v_optimizer: must be sgd, adam or adamax")
    if not 0.0 < cfg.server.prune_epsilon < 1.0:
        raise ConfigError("server.prune_epsilon: must lie inside (0, 1)")
    if not 0.0 < cfg.server.theta0 < 1.0:
        raise ConfigError("server.theta0: must lie inside (0, 1)")
    if cfg.server.temperature <= 0:
        raise ConfigError("server.temperature: must be positive")

    if cfg.strategy == "feddrop":
        if cfg.model.kind != "mlp":
            raise ConfigError("strategy feddrop requires model.kind = 'mlp'")
        if not 0.0 <= cfg.client.drop_rate < 1.0:
            raise ConfigError("client.drop_rate: must lie in [0, 1)")
    if cfg.strategy == "mog" and cfg.server.mog_components < 1:
        raise ConfigError("server.mog_components: must be >= 1")
    if cfg.strategy == "mog" and cfg.server.mog_lambda <= 0:
        raise ConfigError("server.mog_lambda: must be positive")
    return cfg


def override_value(cfg: ExperimentConfig, dotted_key: str, value):
    """Set a nested config value via a 'section.key' path (used by sweeps)."""
    parts = dotted_key.split(".")
    if len(parts) == 1:
        parts = ["experiment", parts[0]]
    if len(parts) != 2:
        raise ConfigError(f"sweep parameter {dotted_key!r} must be "
                          "'section.key'")
    section, key = parts
    target = cfg if section == "experiment" else getattr(cfg, section, None)
    if target is None or not hasattr(target, key):
        raise ConfigError(f"sweep parameter {dotted_key!r} does not exist")
    current = getattr(target, key)
    try:
        coerced = type(current)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep value {value!r} invalid for "
                          f"{dotted_key}: {exc}") from exc
    setattr(target, key, coerced)
    validate_config(cfg)
    return cfg


def config_echo(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
