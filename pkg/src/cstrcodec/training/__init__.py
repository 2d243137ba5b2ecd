"""Synthetic data generation and staged training loops."""

from .data import (
    default_dataset_spec,
    generate_clip,
    generate_synthetic,
    load_clip_frames,
    load_dataset,
    make_texture,
    occlude_clip,
    rotate_clip,
    sample_clips,
    save_clip,
    translate_clip,
)
from .loops import (
    CHECKPOINT_VERSION,
    FROZEN_PRETRAIN_PREFIXES,
    JsonlLogger,
    TrainConfig,
    load_checkpoint,
    parameter_fingerprint,
    pretrain_inter,
    save_checkpoint,
    train_end_to_end,
    train_intra,
)

__all__ = [
    "CHECKPOINT_VERSION",
    "FROZEN_PRETRAIN_PREFIXES",
    "JsonlLogger",
    "TrainConfig",
    "default_dataset_spec",
    "generate_clip",
    "generate_synthetic",
    "load_checkpoint",
    "load_clip_frames",
    "load_dataset",
    "make_texture",
    "occlude_clip",
    "parameter_fingerprint",
    "pretrain_inter",
    "rotate_clip",
    "sample_clips",
    "save_checkpoint",
    "save_clip",
    "train_end_to_end",
    "train_intra",
    "translate_clip",
]
