"""Run-wide configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values and violated invariants."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # representation
    mel_bins: int = 80
    content_bins: int = 60
    sample_rate: int = 16000
    prosody_band: int = 15
    vocab_size: int = 16
    n_prosody_classes: int = 4

    # corpus scale
    corpus_speakers: int = 12
    corpus_pretrain_speakers: int = 8
    corpus_utts_per_speaker: int = 130
    min_phonemes: int = 8
    max_phonemes: int = 28

    # network sizes
    codebook_size: int = 128
    code_dim: int = 16
    d_h: int = 128
    d_s: int = 64
    prosody_hidden: int = 64
    timbre_hidden: int = 64
    est_hidden: int = 128
    est_layers: int = 4
    plm_dim: int = 128
    plm_layers: int = 4
    plm_heads: int = 4
    plm_max_len: int = 128
    k_references: int = 3

    # vector quantization
    vq_decay: float = 0.99
    commitment: float = 0.25
    dead_code_steps: int = 200

    # diffusion
    beta_0: float = 0.05
    beta_1: float = 20.0
    terminal_time: float = 1.0
    t_min: float = 1e-4
    sample_steps: int = 100
    sample_mode: str = "ode"

    # optimisation
    lr: float = 2e-3
    plm_lr: float = 1e-3
    finetune_lr: float = 2e-4
    batch_size: int = 8
    segment_frames: int = 64
    pretrain_steps: int = 2000
    plm_steps: int = 1500
    plm_batch_size: int = 16
    finetune_steps: int = 500
    finetune_batch_size: int = 4
    lambda_ppl: float = 1.0
    grad_clip: float = 1.0

    # prior samples
    prior_pool_size: int = 16
    prior_min_frames: int = 100
    prior_max_frames: int = 150

    # evaluation protocol
    target_snr_db: float = 0.0
    target_count: int = 20
    test_sentences: int = 20
    suite_seeds: int = 5

    def __post_init__(self):
        if self.prosody_band > self.mel_bins:
            raise ConfigError("prosody_band must not exceed mel_bins", "prosody_band")
        if self.content_bins > self.mel_bins:
            raise ConfigError("content_bins must not exceed mel_bins", "content_bins")
        if self.k_references < 1:
            raise ConfigError("k_references must be >= 1", "k_references")
        if not self.beta_1 > self.beta_0 > 0:
            raise ConfigError("need beta_1 > beta_0 > 0", "beta_0")
        if self.terminal_time <= 0:
            raise ConfigError("terminal_time must be positive", "terminal_time")
        if not 0 < self.t_min < self.terminal_time:
            raise ConfigError("t_min must lie in (0, terminal_time)", "t_min")
        if self.sample_mode not in ("sde", "ode"):
            raise ConfigError("sample_mode must be 'sde' or 'ode'", "sample_mode")
        if self.prior_min_frames > self.prior_max_frames:
            raise ConfigError("prior_min_frames > prior_max_frames", "prior_min_frames")
        if self.target_count < 1:
            raise ConfigError("target_count must be >= 1", "target_count")
        if self.suite_seeds < 1:
            raise ConfigError("suite_seeds must be >= 1", "suite_seeds")
        if self.corpus_pretrain_speakers >= self.corpus_speakers:
            raise ConfigError(
                "corpus_pretrain_speakers must leave held-out speakers",
                "corpus_pretrain_speakers",
            )

    def replace(self, **overrides: Any) -> "RunConfig":
        known = {f.name for f in fields(self)}
        for key in overrides:
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'", key)
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        return cls().replace(**values)

    def to_text(self) -> str:
        lines = [f"{k}={_format(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce_value(key: str, raw: str) -> Any:
    """Parse ``raw`` into the declared type of config field ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key '{key}'", key)
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return raw
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r}", key) from None


def parse_config_text(text: str, source: str = "<string>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = coerce_value(key, raw)
    return values


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Defaults, then the config file at ``path``, then ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(), source=str(path)))
    values.update(overrides)
    return RunConfig.from_dict(values)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_text())
