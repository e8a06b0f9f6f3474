"""Low-complexity acoustic scene classification toolkit."""

from ._pacn import (
    PacnConfig,
    ConfigError,
    IngestionError,
    PacnModel,
    WiringMode,
    extract_feature,
    friedman,
    kd_loss,
    load_checkpoint,
    lr_at,
    nemenyi_cd,
    profile,
    read_wav,
    run_cli,
    save_checkpoint,
    UsageError,
    verify_against_runtime,
)

__all__ = [
    "PacnConfig",
    "ConfigError",
    "IngestionError",
    "PacnModel",
    "WiringMode",
    "extract_feature",
    "friedman",
    "kd_loss",
    "load_checkpoint",
    "lr_at",
    "nemenyi_cd",
    "profile",
    "read_wav",
    "run_cli",
    "save_checkpoint",
    "UsageError",
    "verify_against_runtime",
]
