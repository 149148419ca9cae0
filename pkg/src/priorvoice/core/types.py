"""Validators for the array-shaped domain values passed between modules.

Mels, phoneme ids, durations and prosody codes travel as plain numpy arrays
(or torch tensors inside the models); these helpers enforce their invariants
at module boundaries.
"""

from __future__ import annotations

import numpy as np


def check_mel(mel: np.ndarray, bins: int = 80) -> np.ndarray:
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != bins:
        raise ValueError(f"mel must have shape [frames, {bins}], got {mel.shape}")
    if mel.shape[0] < 1:
        raise ValueError("mel must have at least one frame")
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel contains non-finite values")
    return mel


def check_phonemes(ids, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("phoneme sequence must be a non-empty 1-d sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"phoneme ids must lie in [0, {vocab_size})")
    return ids


def check_durations(durations, frames: int | None = None, n_phonemes: int | None = None) -> np.ndarray:
    durations = np.asarray(durations, dtype=np.int64)
    if durations.ndim != 1 or durations.size == 0:
        raise ValueError("durations must be a non-empty 1-d sequence")
    if durations.min() < 1:
        raise ValueError("every duration must be >= 1 frame")
    if n_phonemes is not None and durations.size != n_phonemes:
        raise ValueError(f"{durations.size} durations for {n_phonemes} phonemes")
    if frames is not None and int(durations.sum()) != frames:
        raise ValueError(f"durations sum to {int(durations.sum())}, mel has {frames} frames")
    return durations


def check_codes(codes, codebook_size: int, n_phonemes: int | None = None) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 1:
        raise ValueError("prosody codes must be 1-d")
    if codes.size and (codes.min() < 0 or codes.max() >= codebook_size):
        raise ValueError(f"prosody code outside [0, {codebook_size})")
    if n_phonemes is not None and codes.size != n_phonemes:
        raise ValueError(f"{codes.size} codes for {n_phonemes} phonemes")
    return codes
