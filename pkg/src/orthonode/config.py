"""Experiment configuration read from YAML files."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

import yaml

from orthonode.adversary import AttackSpec
from orthonode.dataio import DatasetConfig
from orthonode.odeint import SolverConfig
from orthonode.trainer import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")

TOP_LEVEL_KEYS = {
    "dataset",
    "model",
    "train",
    "solver",
    "attacks",
    "compare_solvers",
    "certify",
    "out_dir",
    "seed",
    "threads",
}


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configs."""


@dataclass(frozen=True)
class CertifyConfig:
    pairs: int = 100
    radius: float = 0.1
    gronwall_c: float = 1.0
    contraction_threshold: float = 0.05
    trajectory_samples: int = 4

    def __post_init__(self) -> None:
        if self.pairs < 1:
            raise ValueError(f"certify.pairs must be >= 1, got {self.pairs}")
        if self.radius <= 0:
            raise ValueError(f"certify.radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    attacks: Tuple[AttackSpec, ...] = ()
    compare_solvers: Tuple[Tuple[str, SolverConfig], ...] = ()
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    out_dir: str = "results"
    seed: int = 0
    threads: int = 1

    @property
    def arch_kind(self) -> str:
        return self.model.arch_kind

    def with_overrides(
        self,
        seed: Optional[int] = None,
        out_dir: Optional[Union[str, Path]] = None,
        threads: Optional[int] = None,
    ) -> "ExperimentConfig":
        """Apply command-line overrides (``None`` keeps the file value)."""
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if out_dir is not None:
            changes["out_dir"] = str(out_dir)
        if threads is not None:
            changes["threads"] = int(threads)
        return _validated(dataclasses.replace(self, **changes))

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data form; ``from_dict(cfg.to_dict()) == cfg``."""
        return {
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "solver": asdict(self.solver),
            "attacks": [spec.to_dict() for spec in self.attacks],
            "compare_solvers": {name: asdict(cfg) for name, cfg in self.compare_solvers},
            "certify": asdict(self.certify),
            "out_dir": self.out_dir,
            "seed": self.seed,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"Config must be a mapping, got {type(data).__name__}")
        unknown = set(data) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        attacks = data.get("attacks") or []
        if not isinstance(attacks, list):
            raise ConfigError("'attacks' must be a list")
        try:
            specs = tuple(AttackSpec.from_dict(item) for item in attacks)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid attack entry: {e}") from e
        solvers = data.get("compare_solvers") or {}
        if not isinstance(solvers, dict):
            raise ConfigError("'compare_solvers' must map names to solver settings")

        config = cls(
            dataset=_section(DatasetConfig, data, "dataset"),
            model=_section(ModelConfig, data, "model"),
            train=_section(TrainConfig, data, "train"),
            solver=_section(SolverConfig, data, "solver"),
            attacks=specs,
            compare_solvers=tuple(
                (str(name), _section(SolverConfig, solvers, name)) for name in solvers
            ),
            certify=_section(CertifyConfig, data, "certify"),
            out_dir=str(data.get("out_dir", "results")),
            seed=_integer(data, "seed", 0),
            threads=_integer(data, "threads", 1),
        )
        return _validated(config)


def _integer(data: Dict[str, Any], key: str, default: int) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"'{key}' must be an integer, got {value!r}")
    return value


def _section(cls: Type[T], data: Dict[str, Any], key: str) -> T:
    values = data.get(key) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{key}' must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"Unknown keys in '{key}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{key}' section: {e}") from e


def _validated(config: ExperimentConfig) -> ExperimentConfig:
    if config.seed < 0:
        raise ConfigError(f"seed must be non-negative, got {config.seed}")
    if config.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {config.threads}")
    if config.model.arch_kind == "resnet_baseline" and config.compare_solvers:
        raise ConfigError("compare_solvers needs an ODE architecture")
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse and validate a YAML experiment config."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    config = ExperimentConfig.from_dict(data or {})
    logger.debug(f"Loaded config {path}: {config.to_dict()}")
    return config
