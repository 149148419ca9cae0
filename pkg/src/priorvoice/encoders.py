"""Conditioning networks: text encoder, VQ prosody encoder, duration predictor
and timbre encoder, plus the length-regulation helpers that move features
between phoneme and frame resolution.

All sequence tensors are batch-first ``[B, L, D]`` with an accompanying
boolean validity mask ``[B, L]``.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def variance_expand(x: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Repeat row ``i`` of each sequence ``durations[i]`` times.

    ``x`` is ``[L, D]`` with ``durations`` ``[L]``, or padded ``[B, L, D]`` with
    ``durations`` ``[B, L]`` (zero on padding); batched output is right-padded
    with zeros to the longest expansion.
    """
    if x.dim() == 2:
        if (durations < 0).any():
            raise ValueError("durations must be non-negative")
        return torch.repeat_interleave(x, durations, dim=0)
    rows = [torch.repeat_interleave(xb, db, dim=0) for xb, db in zip(x, durations)]
    return nn.utils.rnn.pad_sequence(rows, batch_first=True)


def alignment_matrix(durations: torch.Tensor, frames: int) -> torch.Tensor:
    """One-hot ``[B, L, F]`` map from phonemes to the frames they cover."""
    ends = torch.cumsum(durations, dim=1)
    starts = ends - durations
    f = torch.arange(frames, device=durations.device)[None, None, :]
    return ((f >= starts[..., None]) & (f < ends[..., None])).to(torch.get_default_dtype())


def phoneme_pool(frames: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Mean of each phoneme's frames; the inverse of :func:`variance_expand`."""
    if frames.dim() == 2:
        return phoneme_pool(frames[None], durations[None])[0]
    align = alignment_matrix(durations, frames.shape[1]).to(frames.dtype)
    summed = align @ frames
    return summed / durations.clamp(min=1)[..., None].to(frames.dtype)


class ConvBlock(nn.Module):
    def __init__(self, dim: int, kernel: int = 3, dilation: int = 1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.conv = nn.Conv1d(dim, dim, kernel, padding=dilation * (kernel // 2), dilation=dilation)

    def forward(self, x, mask):
        m = mask[..., None].to(x.dtype)
        h = self.conv((self.norm(x) * m).transpose(1, 2)).transpose(1, 2)
        return (x + F.silu(h)) * m


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, x, mask):
        h = self.norm(x)
        a, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
        return (x + a) * mask[..., None].to(x.dtype)


class Stack(nn.Module):
    """Residual convolutions followed by self-attention."""

    def __init__(self, dim: int, n_conv: int = 2, n_attn: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(
            [ConvBlock(dim, dilation=2**i) for i in range(n_conv)]
            + [AttentionBlock(dim) for _ in range(n_attn)]
        )

    def forward(self, x, mask):
        for block in self.blocks:
            x = block(x, mask)
        return x


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, d_h: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_h)
        self.stack = Stack(d_h)
        self.out = nn.Linear(d_h, d_h)

    def forward(self, phonemes: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``[B, L]`` phoneme ids -> ``[B, L, d_h]``; a 1-d input gives ``[L, d_h]``."""
        if phonemes.dim() == 1:
            return self.forward(phonemes[None])[0]
        if phonemes.shape[1] == 0:
            raise ValueError("empty phoneme sequence")
        if mask is None:
            mask = torch.ones_like(phonemes, dtype=torch.bool)
        h = self.embed(phonemes) * mask[..., None]
        return self.out(self.stack(h, mask)) * mask[..., None]


def nearest_code(features: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row (squared Euclidean), lowest index on ties."""
    dist = ((features[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    return torch.argmin(dist, dim=1)


class _StraightThrough(torch.autograd.Function):
    """Returns the codebook rows exactly; the gradient is copied to ``z``."""

    @staticmethod
    def forward(ctx, z, q):
        return q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class VectorQuantizer(nn.Module):
    """EMA-updated codebook with straight-through gradients and dead-code reseeding."""

    def __init__(
        self,
        codebook_size: int,
        dim: int,
        decay: float = 0.99,
        commitment: float = 0.25,
        dead_code_steps: int = 200,
        eps: float = 1e-5,
    ):
        super().__init__()
        self.decay, self.commitment, self.dead_code_steps, self.eps = decay, commitment, dead_code_steps, eps
        codebook = torch.randn(codebook_size, dim)
        self.register_buffer("codebook", codebook)
        self.register_buffer("ema_count", torch.ones(codebook_size))
        self.register_buffer("ema_sum", codebook.clone())
        self.register_buffer("idle_steps", torch.zeros(codebook_size))

    @property
    def size(self) -> int:
        return self.codebook.shape[0]

    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.numel() and (codes.min() < 0 or codes.max() >= self.size):
            raise ValueError(f"code index outside [0, {self.size})")
        return self.codebook[codes]

    def forward(self, z: torch.Tensor):
        """Quantize rows of ``z`` ``[N, D]``.

        Returns ``(indices, quantized_st, losses)`` where ``quantized_st`` equals
        the codebook rows in value but carries the gradient of ``z``.
        """
        indices = nearest_code(z.detach(), self.codebook)
        q = self.codebook[indices]
        if self.training and z.shape[0] > 0:
            self._ema_update(z.detach(), indices)
        losses = {
            "codebook": F.mse_loss(q, z.detach()),  # reported only; the codebook learns by EMA
            "commitment": self.commitment * F.mse_loss(z, q),
        }
        q_st = _StraightThrough.apply(z, q.detach())
        return indices, q_st, losses

    @torch.no_grad()
    def _ema_update(self, z, indices):
        onehot = F.one_hot(indices, self.size).to(z.dtype)
        counts = onehot.sum(0)
        self.ema_count.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_sum.mul_(self.decay).add_(onehot.t() @ z, alpha=1 - self.decay)
        n = self.ema_count.sum()
        smoothed = (self.ema_count + self.eps) / (n + self.size * self.eps) * n
        self.codebook.copy_(self.ema_sum / smoothed[:, None])

        self.idle_steps.add_(1)
        self.idle_steps[counts > 0] = 0
        dead = torch.nonzero(self.idle_steps >= self.dead_code_steps).flatten()
        if dead.numel():
            picks = torch.randint(0, z.shape[0], (dead.numel(),))
            self.codebook[dead] = z[picks]
            self.ema_sum[dead] = z[picks]
            self.ema_count[dead] = 1.0
            self.idle_steps[dead] = 0


class ProsodyEncoder(nn.Module):
    """Frame encoder over the low mel band, pooled per phoneme and quantized."""

    def __init__(
        self,
        band: int,
        hidden: int,
        code_dim: int,
        codebook_size: int,
        d_h: int,
        decay: float = 0.99,
        commitment: float = 0.25,
        dead_code_steps: int = 200,
    ):
        super().__init__()
        self.band = band
        self.inp = nn.Linear(band, hidden)
        self.stack = Stack(hidden)
        self.out = nn.Linear(hidden, code_dim)
        self.vq = VectorQuantizer(codebook_size, code_dim, decay, commitment, dead_code_steps)
        self.embed_proj = nn.Linear(code_dim, d_h)

    def features(self, mel, frame_mask, durations):
        """Per-phoneme pooled features ``[B, L, code_dim]`` before quantization."""
        if (durations.sum(1) != frame_mask.sum(1)).any():
            raise ValueError("durations do not sum to the mel frame count")
        h = self.inp(mel[..., : self.band]) * frame_mask[..., None]
        h = self.out(self.stack(h, frame_mask))
        return phoneme_pool(h, durations)

    def forward(self, mel, frame_mask, durations):
        """Returns ``(codes [B, L], quantized [B, L, code_dim], losses)``."""
        z = self.features(mel, frame_mask, durations)
        ph_mask = durations > 0
        idx, q_flat, losses = self.vq(z[ph_mask])
        codes = torch.zeros(ph_mask.shape, dtype=torch.long, device=mel.device)
        codes[ph_mask] = idx
        q = torch.zeros_like(z)
        q[ph_mask] = q_flat
        return codes, q, losses

    def embed(self, codes: torch.Tensor) -> torch.Tensor:
        """Embedding fed to the decoder for given code indices."""
        return self.embed_proj(self.vq.lookup(codes))


class DurationPredictor(nn.Module):
    def __init__(self, d_h: int):
        super().__init__()
        self.blocks = nn.ModuleList([ConvBlock(d_h), ConvBlock(d_h)])
        self.out = nn.Linear(d_h, 1)

    def forward(self, hidden, mask):
        """Log-duration per phoneme, ``[B, L]``. Input is detached from the text encoder."""
        h = hidden.detach()
        for block in self.blocks:
            h = block(h, mask)
        return self.out(h).squeeze(-1) * mask

    @torch.no_grad()
    def predict(self, hidden, mask=None) -> torch.Tensor:
        """Integer frame counts, rounded and clamped to at least one frame."""
        if hidden.dim() == 2:
            return self.predict(hidden[None])[0]
        if mask is None:
            mask = torch.ones(hidden.shape[:2], dtype=torch.bool)
        d = torch.clamp(torch.round(torch.exp(self(hidden, mask))), min=1).long()
        return d * mask


def cycle_references(refs: Sequence, k: int) -> list:
    """Exactly ``k`` references, reusing the given ones cyclically if too few."""
    if len(refs) == 0:
        raise ValueError("need at least one reference")
    return [refs[i % len(refs)] for i in range(k)]


class TimbreEncoder(nn.Module):
    def __init__(self, mel_bins: int, hidden: int, d_s: int):
        super().__init__()
        self.inp = nn.Linear(mel_bins, hidden)
        self.stack = Stack(hidden)
        self.out = nn.Linear(hidden, d_s)

    def forward(self, mel, mask):
        """Masked mean over frames of the encoded mel, ``[B, d_s]``."""
        m = mask[..., None].to(mel.dtype)
        h = self.out(self.stack(self.inp(mel) * m, mask)) * m
        return h.sum(1) / m.sum(1)

    def encode_references(self, references: Sequence[Sequence[torch.Tensor]], k: int) -> torch.Tensor:
        """One vector per item; each item's ``k`` references are concatenated along frames."""
        joined = [torch.cat(cycle_references(refs, k), dim=0) for refs in references]
        lengths = torch.tensor([j.shape[0] for j in joined])
        mel = nn.utils.rnn.pad_sequence(joined, batch_first=True)
        return self(mel, lengths_to_mask(lengths))
