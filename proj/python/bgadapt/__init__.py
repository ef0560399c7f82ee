"""Background adaptation for class-incremental segmentation (toy scale)."""

from ._bgadapt import (
    ConfigError,
    ContractError,
    DomainError,
    Error,
    IoError,
    ShapeError,
    TrainingError,
    ablate,
    aggregate_inference,
    aggregate_training,
    bga_minus_term,
    build_split,
    config_hash,
    default_config,
    filter_residual,
    grad_check,
    grad_check_cases,
    grouped_miou,
    protocol_steps,
    pseudo_label,
    train,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DomainError",
    "Error",
    "IoError",
    "ShapeError",
    "TrainingError",
    "ablate",
    "aggregate_inference",
    "aggregate_training",
    "bga_minus_term",
    "build_split",
    "config_hash",
    "default_config",
    "filter_residual",
    "grad_check",
    "grad_check_cases",
    "grouped_miou",
    "protocol_steps",
    "pseudo_label",
    "train",
]
