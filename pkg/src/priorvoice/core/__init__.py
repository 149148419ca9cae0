from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CorruptManifestError,
    ShapeMismatchError,
    TruncatedPayloadError,
    load_checkpoint,
    load_module_state,
    module_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config, save_config
from .seed import generator, seed_all
from .types import check_codes, check_durations, check_mel, check_phonemes

__all__ = [
    "Checkpoint", "CheckpointError", "CorruptManifestError", "ShapeMismatchError", "TruncatedPayloadError",
    "load_checkpoint", "load_module_state", "module_checkpoint", "save_checkpoint",
    "ConfigError", "RunConfig", "load_config", "save_config",
    "generator", "seed_all",
    "check_codes", "check_durations", "check_mel", "check_phonemes",
]
