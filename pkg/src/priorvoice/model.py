"""The acoustic model: conditioning encoders plus the diffusion noise estimator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .core.checkpoint import Checkpoint, load_module_state, module_checkpoint
from .core.config import RunConfig
from .diffusion import ConditioningBundle, NoiseEstimator, NoiseSchedule
from .encoders import (
    DurationPredictor,
    ProsodyEncoder,
    TextEncoder,
    TimbreEncoder,
    lengths_to_mask,
    variance_expand,
)

ESTIMATOR_PREFIX = "estimator."


class VoiceModel(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        c = config
        self.config = config
        self.schedule = NoiseSchedule.from_config(config)
        self.text_encoder = TextEncoder(c.vocab_size, c.d_h)
        self.prosody_encoder = ProsodyEncoder(
            c.prosody_band, c.prosody_hidden, c.code_dim, c.codebook_size, c.d_h,
            c.vq_decay, c.commitment, c.dead_code_steps,
        )
        self.duration_predictor = DurationPredictor(c.d_h)
        self.timbre_encoder = TimbreEncoder(c.mel_bins, c.timbre_hidden, c.d_s)
        self.estimator = NoiseEstimator(c.mel_bins, c.d_h, c.d_s, c.est_hidden, c.est_layers)
        self.register_buffer("mel_mean", torch.zeros(()))
        self.register_buffer("mel_std", torch.ones(()))

    # -- normalization ------------------------------------------------------

    def fit_normalization(self, mels: Sequence[np.ndarray]) -> None:
        values = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in mels])
        self.mel_mean.fill_(float(values.mean()))
        self.mel_std.fill_(float(values.std()))

    def normalize(self, mel) -> torch.Tensor:
        mel = torch.as_tensor(np.asarray(mel, dtype=np.float32))
        return (mel - self.mel_mean) / self.mel_std

    def denormalize(self, x: torch.Tensor) -> np.ndarray:
        return (x * self.mel_std + self.mel_mean).detach().cpu().numpy().astype(np.float32)

    # -- conditioning -------------------------------------------------------

    def timbre(self, references: Sequence[Sequence[torch.Tensor]]) -> torch.Tensor:
        """Timbre vectors from normalized reference mels, ``k`` per item."""
        return self.timbre_encoder.encode_references(references, self.config.k_references)

    def condition(
        self,
        phonemes: torch.Tensor,
        ph_mask: torch.Tensor,
        durations: torch.Tensor,
        s: torch.Tensor,
        mel: torch.Tensor | None = None,
        codes: torch.Tensor | None = None,
    ):
        """Build the frame-level bundle.

        Prosody comes from ``codes`` when given, otherwise from quantizing
        ``mel`` (teacher forcing). Returns ``(bundle, mu_ph, codes, vq_losses)``.
        """
        mu_ph = self.text_encoder(phonemes, ph_mask)
        frames = durations.sum(1)
        frame_mask = lengths_to_mask(frames)
        vq_losses = {}
        if codes is None:
            if mel is None:
                raise ValueError("need either a mel or prosody codes")
            codes, q, vq_losses = self.prosody_encoder(mel[:, : frame_mask.shape[1]], frame_mask, durations)
            p_ph = self.prosody_encoder.embed_proj(q)
        else:
            p_ph = self.prosody_encoder.embed(codes) * ph_mask[..., None]
        bundle = ConditioningBundle(
            variance_expand(mu_ph, durations), variance_expand(p_ph, durations), s, frame_mask
        )
        return bundle, mu_ph, codes, vq_losses

    # -- checkpoints --------------------------------------------------------

    def to_checkpoint(
        self,
        step: int = 0,
        trainable: Callable[[str], bool] | None = None,
        meta: dict | None = None,
    ) -> Checkpoint:
        return module_checkpoint(self, self.config, trainable=trainable, step=step, meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "VoiceModel":
        if ckpt.config is None:
            raise ValueError("checkpoint carries no config")
        model = cls(ckpt.config)
        load_module_state(model, ckpt)
        model.eval()
        return model


def estimator_only(name: str) -> bool:
    return name.startswith(ESTIMATOR_PREFIX)


@dataclass
class Batch:
    phonemes: torch.Tensor  # [B, L]
    ph_mask: torch.Tensor  # [B, L]
    durations: torch.Tensor  # [B, L], zero on padding
    mel: torch.Tensor  # [B, F, bins], normalized, zero on padding
    frame_mask: torch.Tensor  # [B, F]


def collate(model: VoiceModel, utterances, mels: Sequence[torch.Tensor] | None = None) -> Batch:
    """Pad a list of utterances; ``mels`` overrides the (normalized) mel per item."""
    if mels is None:
        mels = [model.normalize(u.mel) for u in utterances]
    pad = nn.utils.rnn.pad_sequence
    phonemes = pad([torch.as_tensor(u.phonemes) for u in utterances], batch_first=True)
    durations = pad([torch.as_tensor(u.durations) for u in utterances], batch_first=True)
    return Batch(
        phonemes=phonemes,
        ph_mask=durations > 0,
        durations=durations,
        mel=pad(list(mels), batch_first=True),
        frame_mask=lengths_to_mask(torch.tensor([m.shape[0] for m in mels])),
    )


def random_crop(x0: torch.Tensor, bundle: ConditioningBundle, length: int, generator: torch.Generator):
    """Crop every item to ``length`` frames at a random valid offset (pads short items)."""
    frames = x0.shape[1]
    if frames < length:
        extra = length - frames
        x0 = nn.functional.pad(x0, (0, 0, 0, extra))
        bundle = ConditioningBundle(
            nn.functional.pad(bundle.mu, (0, 0, 0, extra)),
            nn.functional.pad(bundle.p, (0, 0, 0, extra)),
            bundle.s,
            nn.functional.pad(bundle.mask, (0, extra)),
        )
    lengths = bundle.mask.sum(1)
    room = torch.clamp(lengths - length, min=0)
    start = (torch.rand(x0.shape[0], generator=generator) * (room + 1).float()).long()
    start = torch.minimum(start, room)
    idx = start[:, None] + torch.arange(length)[None, :]
    x0 = torch.gather(x0, 1, idx[..., None].expand(-1, -1, x0.shape[-1]))
    return x0, bundle.crop(start, length)
