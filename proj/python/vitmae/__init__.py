"""Masked-autoencoder self pre-training of vision transformers for ΔB_max regression."""

from ._core import (
    Autoencoder,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    ModelConfig,
    NumericError,
    Regressor,
    checkpoint_metadata,
    classify_defect,
    compute_label,
    count_head_params,
    count_params,
    masked_count,
    patchify,
    run_cli,
    sample_mask,
    synth,
    write_synth,
)

__all__ = [
    "Autoencoder",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "ModelConfig",
    "NumericError",
    "Regressor",
    "checkpoint_metadata",
    "classify_defect",
    "compute_label",
    "count_head_params",
    "count_params",
    "masked_count",
    "patchify",
    "run_cli",
    "sample_mask",
    "synth",
    "write_synth",
]
