"""Flexible-patch-size ViT self-supervised pre-training with downstream heads and an evaluation harness."""

from .backbone import DESK, MINI, VIT_B, VIT_S, EncoderConfig, FlexiViT, encode, patchify, pi_resize
from .config import PretrainConfig, desk_config, load_config
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
    InvalidArgumentError,
    NumericError,
    SamplingError,
    UndefinedMetricError,
)
from .metrics import MetricReport, auroc, bootstrap, macro_f1

__version__ = "0.1.0"

__all__ = [
    "DESK",
    "MINI",
    "VIT_B",
    "VIT_S",
    "EncoderConfig",
    "FlexiViT",
    "encode",
    "patchify",
    "pi_resize",
    "PretrainConfig",
    "desk_config",
    "load_config",
    "CheckpointError",
    "CheckpointVersionError",
    "CorruptCheckpointError",
    "InvalidArgumentError",
    "NumericError",
    "SamplingError",
    "UndefinedMetricError",
    "MetricReport",
    "auroc",
    "bootstrap",
    "macro_f1",
]
