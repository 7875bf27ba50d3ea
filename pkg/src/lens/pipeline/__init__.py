"""Configuration, checkpoints and the training stages."""

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    ConfigMismatch,
    StageOrderError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    optimizer_entries,
    optimizer_from_entries,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, config_from_dict, load_config, paper_scale, save_config
from .stages import (
    FreezeViolation,
    build_system,
    cmd_ablate,
    cmd_align,
    cmd_bootstrap,
    cmd_eval,
    cmd_rl,
    evaluate,
    load_split,
)
