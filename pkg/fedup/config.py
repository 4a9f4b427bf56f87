"""
Experiment configuration: JSON document -> validated ExperimentConfig.

All invariants are checked here, before any data is generated or any
model is trained.
"""

import json
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .baselines import BaselineKind, BaselineSpec
from .data import AttackKind, AttackSpec, PartitionScheme, TriggerSpec
from .errors import ConfigurationError, MajorityViolationError
from .fl import Weighting
from .nn import ARCHITECTURES
from .unlearn import PruningHeuristicConfig, UnlearnConfig

logger = logging.getLogger(__name__)

FEDUP_STRATEGY = "fedup"
DATASET_KINDS = ("synthetic", "synthetic_images", "idx")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    hidden: int = 64
    conv_channels: int = 4
    kernel_size: int = 3
    input_affine: bool = False


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 16
    per_class_count: int = 200
    test_per_class: int = 50
    cluster_spread: float = 0.5
    noise_dims: int = 0
    image_size: int = 8
    channels: int = 1
    noise: float = 0.1
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_images_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    test_fraction: float = 0.2


@dataclass(frozen=True)
class PartitionConfig:
    scheme: PartitionScheme = PartitionScheme.IID
    alpha: float = 1.0


@dataclass(frozen=True)
class TrainingConfig:
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    weighting: Weighting = Weighting.UNIFORM


@dataclass(frozen=True)
class RetrainConfig:
    enabled: bool = True
    max_rounds: int = 60


@dataclass(frozen=True)
class Detection:
    round: int
    client_id: int


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "experiment"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    client_count: int = 10
    malicious_ids: Tuple[int, ...] = ()
    attack: Optional[AttackSpec] = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    detections: Tuple[Detection, ...] = ()
    strategy: Union[str, BaselineSpec] = FEDUP_STRATEGY
    pruning: PruningHeuristicConfig = field(default_factory=PruningHeuristicConfig)
    p_opt: Optional[float] = None
    signed_rank: bool = False
    rate_limit_T: int = 10
    total_rounds: int = 30
    max_recovery_rounds: int = 10
    fixed_recovery_rounds: Optional[int] = None
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    allow_majority_violation: bool = False
    workers: int = 1
    checkpoint_dir: Optional[str] = None

    @property
    def strategy_name(self) -> str:
        if isinstance(self.strategy, BaselineSpec):
            return self.strategy.kind.value
        return self.strategy

    @property
    def benign_ids(self) -> Tuple[int, ...]:
        malicious = set(self.malicious_ids)
        return tuple(i for i in range(self.client_count) if i not in malicious)

    def unlearn_config(self) -> UnlearnConfig:
        return UnlearnConfig(
            pruning=self.pruning,
            p_opt=self.p_opt,
            signed_rank=self.signed_rank,
            max_recovery_rounds=self.max_recovery_rounds,
            fixed_recovery_rounds=self.fixed_recovery_rounds,
            weighting=self.training.weighting,
        )

    def to_dict(self) -> Dict:
        return _plain(self)


def _plain(value):
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ============================================================================
# Parsing
# ============================================================================

def _section(cls, raw: Optional[Dict], name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid '{name}': {e}") from e


def _parse_attack(raw: Optional[Dict]) -> Optional[AttackSpec]:
    if raw is None:
        return None
    raw = dict(raw)
    trigger = _section(TriggerSpec, raw.pop("trigger", None), "attack.trigger")
    if trigger.feature_indices is not None:
        trigger = replace(trigger, feature_indices=tuple(trigger.feature_indices))
    return _section(AttackSpec, {**raw, "trigger": trigger}, "attack")


def _parse_strategy(raw) -> Union[str, BaselineSpec]:
    if raw is None or raw == FEDUP_STRATEGY:
        return FEDUP_STRATEGY
    if isinstance(raw, str):
        raw = {"kind": raw}
    try:
        return BaselineSpec(raw["kind"], raw.get("P"), int(raw.get("seed", 0)))
    except (KeyError, ValueError) as e:
        raise ConfigurationError(f"invalid strategy {raw!r}: {e}") from e


def _resolve_malicious(raw: Dict, client_count: int) -> Tuple[int, ...]:
    if "malicious_ids" in raw and "malicious_fraction" in raw:
        raise ConfigurationError("give either malicious_ids or malicious_fraction, not both")
    if "malicious_fraction" in raw:
        fraction = float(raw["malicious_fraction"])
        if not 0.0 <= fraction <= 1.0:
            raise ConfigurationError(f"malicious_fraction must lie in [0, 1], got {fraction}")
        return tuple(range(int(math.floor(fraction * client_count + 1e-9))))
    ids = tuple(int(i) for i in raw.get("malicious_ids", ()))
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate malicious ids: {ids}")
    return tuple(sorted(ids))


TOP_LEVEL_KEYS = {f.name for f in fields(ExperimentConfig)} | {"malicious_fraction"}


def config_from_dict(raw: Dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a parsed JSON document."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config document must be a JSON object")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    client_count = int(raw.get("client_count", 10))
    detections = []
    for entry in raw.get("detections", []):
        try:
            detections.append(Detection(int(entry["round"]), int(entry["client_id"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid detection entry {entry!r}") from e

    try:
        config = ExperimentConfig(
            run_id=str(raw.get("run_id", "experiment")),
            seed=int(raw.get("seed", 0)),
            model=_section(ModelConfig, raw.get("model"), "model"),
            dataset=_section(DatasetConfig, raw.get("dataset"), "dataset"),
            partition=_section(PartitionConfig, raw.get("partition"), "partition"),
            client_count=client_count,
            malicious_ids=_resolve_malicious(raw, client_count),
            attack=_parse_attack(raw.get("attack")),
            training=_section(TrainingConfig, raw.get("training"), "training"),
            detections=tuple(sorted(detections, key=lambda d: (d.round, d.client_id))),
            strategy=_parse_strategy(raw.get("strategy")),
            pruning=_section(PruningHeuristicConfig, raw.get("pruning"), "pruning"),
            p_opt=raw.get("p_opt"),
            signed_rank=bool(raw.get("signed_rank", False)),
            rate_limit_T=int(raw.get("rate_limit_T", 10)),
            total_rounds=int(raw.get("total_rounds", 30)),
            max_recovery_rounds=int(raw.get("max_recovery_rounds", 10)),
            fixed_recovery_rounds=raw.get("fixed_recovery_rounds"),
            retrain=_section(RetrainConfig, raw.get("retrain"), "retrain"),
            allow_majority_violation=bool(raw.get("allow_majority_violation", False)),
            workers=int(raw.get("workers", 1)),
            checkpoint_dir=raw.get("checkpoint_dir"),
        )
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid config value: {e}") from e

    config = _normalize_enums(config)
    validate_config(config)
    return config


def _normalize_enums(config: ExperimentConfig) -> ExperimentConfig:
    try:
        partition = replace(config.partition, scheme=PartitionScheme(config.partition.scheme))
        training = replace(config.training, weighting=Weighting(config.training.weighting))
    except ValueError as e:
        raise ConfigurationError(str(e)) from e
    return replace(config, partition=partition, training=training)


def validate_config(config: ExperimentConfig) -> None:
    """Reject a config that breaks an experiment invariant."""
    n = config.client_count
    if n < 2:
        raise ConfigurationError("client_count must be >= 2")
    if config.total_rounds < 1:
        raise ConfigurationError("total_rounds must be >= 1")
    if config.rate_limit_T < 1:
        raise ConfigurationError("rate_limit_T must be >= 1")
    if config.workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if config.model.arch not in ARCHITECTURES:
        raise ConfigurationError(f"Unknown architecture: {config.model.arch}")
    if config.dataset.kind not in DATASET_KINDS:
        raise ConfigurationError(f"dataset kind must be one of {DATASET_KINDS}")
    expected_arch = "mlp" if config.dataset.kind == "synthetic" else "cnn"
    if config.model.arch != expected_arch:
        raise ConfigurationError(
            f"dataset '{config.dataset.kind}' needs the '{expected_arch}' architecture"
        )
    if config.dataset.kind == "idx" and not (config.dataset.images_path and config.dataset.labels_path):
        raise ConfigurationError("idx dataset needs images_path and labels_path")
    if not 0 <= config.dataset.noise_dims < config.dataset.dim:
        raise ConfigurationError(f"noise_dims must lie in [0, {config.dataset.dim})")
    if config.training.local_epochs < 0 or config.training.batch_size < 1:
        raise ConfigurationError("training needs local_epochs >= 0 and batch_size >= 1")

    if any(not 0 <= i < n for i in config.malicious_ids):
        raise ConfigurationError(f"malicious ids {config.malicious_ids} outside [0, {n})")
    limit = (n - 1) // 2
    if len(config.malicious_ids) > limit and not config.allow_majority_violation:
        raise MajorityViolationError(
            f"{len(config.malicious_ids)} malicious of {n} clients; at most {limit} keep a benign majority"
        )
    for detection in config.detections:
        if not 1 <= detection.round <= config.total_rounds:
            raise ConfigurationError(
                f"detection round {detection.round} outside [1, {config.total_rounds}]"
            )
        if not 0 <= detection.client_id < n:
            raise ConfigurationError(f"detected client {detection.client_id} outside [0, {n})")

    if config.attack is not None:
        config.attack.check_classes(config.dataset.num_classes)
        if not config.malicious_ids:
            logger.warning("attack configured but no malicious clients; it has no effect")
    if config.retrain.max_rounds < 1:
        raise ConfigurationError("retrain.max_rounds must be >= 1")
    if isinstance(config.strategy, BaselineSpec) and config.strategy.kind == BaselineKind.RETRAIN \
            and not config.retrain.enabled:
        raise ConfigurationError("strategy 'retrain' needs retrain.enabled")
    config.unlearn_config()


# ============================================================================
# Files and overrides
# ============================================================================

def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(raw: Dict, overrides: Sequence[str]) -> Dict:
    """
    Apply "dotted.key=value" overrides to a raw config document.

    Values are parsed as JSON when possible and kept as strings otherwise.
    Returns a new document.
    """
    document = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigurationError(f"override '{item}' has an empty key")
        node = document
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigurationError(f"override '{item}': '{part}' is not an object")
            node = child
        node[parts[-1]] = _coerce(value.strip())
    return document


def read_config_document(path: Union[str, Path]) -> Dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    except ValueError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e


def load_config(path: Union[str, Path], overrides: Sequence[str] = (),
                seed: Optional[int] = None) -> ExperimentConfig:
    """
    Read, override and validate an experiment config.

    Args:
        path: JSON config file
        overrides: dotted.key=value strings applied in order
        seed: Replaces the config seed when given

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigurationError: unreadable file, bad JSON or an invalid value
    """
    raw = apply_overrides(read_config_document(path), overrides)
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw)


# ============================================================================
# Published schema
# ============================================================================

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _nullable(schema: Dict) -> Dict:
    return {"anyOf": [schema, {"type": "null"}]}


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "FedUP simulation experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "run_id": _STR,
        "seed": _INT,
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "arch": {"enum": sorted(ARCHITECTURES)},
                "hidden": _INT,
                "conv_channels": _INT,
                "kernel_size": _INT,
                "input_affine": _BOOL,
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(DATASET_KINDS)},
                "num_classes": _INT,
                "dim": _INT,
                "per_class_count": _INT,
                "test_per_class": _INT,
                "cluster_spread": _NUM,
                "noise_dims": _INT,
                "image_size": _INT,
                "channels": _INT,
                "noise": _NUM,
                "images_path": _nullable(_STR),
                "labels_path": _nullable(_STR),
                "test_images_path": _nullable(_STR),
                "test_labels_path": _nullable(_STR),
                "test_fraction": _NUM,
            },
        },
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scheme": {"enum": [s.value for s in PartitionScheme]},
                "alpha": _NUM,
            },
        },
        "client_count": _INT,
        "malicious_ids": {"type": "array", "items": _INT},
        "malicious_fraction": _NUM,
        "attack": _nullable({
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": [k.value for k in AttackKind]},
                "poison_fraction": _NUM,
                "source_class": _nullable(_INT),
                "target_class": _INT,
                "trigger": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "size": _INT,
                        "sentinel": _nullable(_NUM),
                        "feature_indices": _nullable({"type": "array", "items": _INT}),
                    },
                },
            },
        }),
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "local_epochs": _INT,
                "batch_size": _INT,
                "learning_rate": _NUM,
                "weighting": {"enum": [w.value for w in Weighting]},
            },
        },
        "detections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["round", "client_id"],
                "properties": {"round": _INT, "client_id": _INT},
            },
        },
        "strategy": {
            "anyOf": [
                {"enum": [FEDUP_STRATEGY] + [k.value for k in BaselineKind]},
                {
                    "type": "object",
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": [k.value for k in BaselineKind]},
                        "P": _nullable(_NUM),
                        "seed": _INT,
                    },
                },
            ],
        },
        "pruning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {name: _NUM for name in ("p_min", "p_max", "gamma", "sim_min", "sim_max")},
        },
        "p_opt": _nullable(_NUM),
        "signed_rank": _BOOL,
        "rate_limit_T": _INT,
        "total_rounds": _INT,
        "max_recovery_rounds": _INT,
        "fixed_recovery_rounds": _nullable(_INT),
        "retrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"enabled": _BOOL, "max_rounds": _INT},
        },
        "allow_majority_violation": _BOOL,
        "workers": _INT,
        "checkpoint_dir": _nullable(_STR),
    },
}
