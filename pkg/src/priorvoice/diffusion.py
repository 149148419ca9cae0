"""Variance-preserving score diffusion over normalized mels.

Forward process ``dX = -1/2 beta(t) X dt + sqrt(beta(t)) dW`` with a linear
``beta``; the estimator is trained to output ``-eps / sigma(t)`` so that
``estimator / sigma(t)`` is the score of the noisy marginal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def _lib(x):
    return torch if isinstance(x, torch.Tensor) else np


@dataclass(frozen=True)
class NoiseSchedule:
    beta_0: float = 0.05
    beta_1: float = 20.0
    T: float = 1.0
    t_min: float = 1e-4

    @classmethod
    def from_config(cls, config) -> "NoiseSchedule":
        return cls(config.beta_0, config.beta_1, config.terminal_time, config.t_min)

    def beta(self, t):
        return self.beta_0 + (self.beta_1 - self.beta_0) * t / self.T

    def integral(self, t):
        """Closed-form ``B(t) = int_0^t beta(s) ds``."""
        return self.beta_0 * t + 0.5 * (self.beta_1 - self.beta_0) * t * t / self.T

    def sigma(self, t):
        return _lib(t).sqrt(-_lib(t).expm1(-self.integral(t)))

    def decay(self, t):
        return _lib(t).exp(-0.5 * self.integral(t))


def _as_generator(seed) -> torch.Generator | None:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _per_sample(t, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        t = t.expand(x.shape[0] if x.dim() == 3 else 1)
    return t


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, *([1] * (x.dim() - 1))) if x.dim() == 3 else v.reshape(())


def forward_sample(x0: torch.Tensor, t, schedule: NoiseSchedule, noise_seed=None):
    """Draw ``x_t = decay(t) x0 + eps`` with ``eps ~ N(0, sigma(t)^2 I)``.

    ``t`` is a scalar or one time per batch item. ``noise_seed`` may be an int,
    a ``torch.Generator`` or ``None`` (global stream). Returns ``(x_t, eps)``.
    """
    t = _per_sample(t, x0)
    if (t < 0).any() or (t > schedule.T).any():
        raise ValueError(f"t must lie in [0, {schedule.T}]")
    z = torch.randn(x0.shape, generator=_as_generator(noise_seed), dtype=x0.dtype)
    eps = _bcast(schedule.sigma(t), x0) * z
    return _bcast(schedule.decay(t), x0) * x0 + eps, eps


@dataclass
class ConditioningBundle:
    mu: torch.Tensor  # [B, F, d_h] expanded text hidden
    p: torch.Tensor  # [B, F, d_h] expanded prosody embedding
    s: torch.Tensor  # [B, d_s] timbre
    mask: torch.Tensor | None = None  # [B, F] valid frames

    def __post_init__(self):
        if self.mu.shape[:2] != self.p.shape[:2]:
            raise ValueError(f"text and prosody frame counts differ: {self.mu.shape[1]} vs {self.p.shape[1]}")

    @property
    def frames(self) -> int:
        return self.mu.shape[1]

    def crop(self, start: torch.Tensor, length: int) -> "ConditioningBundle":
        idx = start[:, None] + torch.arange(length)[None, :]
        take = lambda x: torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))
        mask = torch.gather(self.mask, 1, idx) if self.mask is not None else None
        return ConditioningBundle(take(self.mu), take(self.p), self.s, mask)


def timestep_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class EstimatorLayer(nn.Module):
    def __init__(self, hidden: int, d_s: int, t_dim: int, dilation: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden)
        self.cond = nn.Linear(d_s + t_dim, hidden)
        self.conv = nn.Conv1d(hidden, hidden, 3, padding=dilation, dilation=dilation)
        self.mix = nn.Linear(hidden, hidden)

    def forward(self, h, cond, m):
        a = self.norm(h) + self.cond(cond)[:, None, :]
        a = self.conv(F.silu(a).transpose(1, 2)).transpose(1, 2)
        return (h + self.mix(F.silu(a))) * m


class NoiseEstimator(nn.Module):
    """``eps_hat(x_t, t, mu, p, s)``: frame-wise convolutional network.

    ``x_t``, ``mu`` and ``p`` are concatenated per frame; the timbre vector and
    the time embedding are projected and added inside every layer.
    """

    def __init__(self, mel_bins: int, d_h: int, d_s: int, hidden: int = 128, n_layers: int = 4, t_dim: int = 64):
        super().__init__()
        self.t_dim = t_dim
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.inp = nn.Linear(mel_bins + 2 * d_h, hidden)
        self.layers = nn.ModuleList(
            [EstimatorLayer(hidden, d_s, t_dim, dilation=2 ** (i % 3)) for i in range(n_layers)]
        )
        self.out = nn.Linear(hidden, mel_bins)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_t, t, mu, p, s, mask=None):
        t = _per_sample(t, x_t)
        m = torch.ones_like(x_t[..., :1]) if mask is None else mask[..., None].to(x_t.dtype)
        cond = torch.cat([s, self.t_mlp(timestep_embedding(t, self.t_dim))], dim=-1)
        h = self.inp(torch.cat([x_t, mu, p], dim=-1)) * m
        for layer in self.layers:
            h = layer(h, cond, m)
        return self.out(h) * m


def _masked_mean(sq: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return sq.mean()
    m = mask[..., None].to(sq.dtype)
    return (sq * m).sum() / (m.sum() * sq.shape[-1])


def sample_times(n: int, schedule: NoiseSchedule, t_seed=None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(n, generator=_as_generator(t_seed), dtype=dtype)
    return schedule.t_min + (schedule.T - schedule.t_min) * u


def diffusion_loss(
    estimator: nn.Module,
    x0: torch.Tensor,
    bundle: ConditioningBundle,
    schedule: NoiseSchedule,
    t_seed=None,
    noise_seed=None,
    t: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over elements of ``(eps_hat + eps / sigma(t))^2`` with ``t ~ U[t_min, T]``."""
    if x0.shape[1] != bundle.frames:
        raise ValueError(f"mel has {x0.shape[1]} frames, conditioning has {bundle.frames}")
    if t is None:
        t = sample_times(x0.shape[0], schedule, t_seed, x0.dtype)
    x_t, eps = forward_sample(x0, t, schedule, noise_seed)
    if bundle.mask is not None:
        x_t = x_t * bundle.mask[..., None]
    sigma = _bcast(schedule.sigma(t), x0)
    out = estimator(x_t, t, bundle.mu, bundle.p, bundle.s, bundle.mask)
    return _masked_mean((out + eps / sigma) ** 2, bundle.mask)


ScoreFn = Callable[[torch.Tensor, float], torch.Tensor]


def reverse_integrate(
    score_fn: ScoreFn,
    x_T: torch.Tensor,
    schedule: NoiseSchedule,
    n_steps: int,
    mode: str = "sde",
    noise_seed=None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Euler(-Maruyama) integration of the reverse dynamics from ``T`` to ``t_min``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if mode not in ("sde", "ode"):
        raise ValueError(f"unknown mode {mode!r}")
    g = _as_generator(noise_seed)
    m = None if mask is None else mask[..., None].to(x_T.dtype)
    h = (schedule.T - schedule.t_min) / n_steps
    coef = 1.0 if mode == "sde" else 0.5
    x = x_T if m is None else x_T * m
    for i in range(n_steps):
        t = schedule.T - i * h
        beta = schedule.beta(t)
        x = x + h * beta * (0.5 * x + coef * score_fn(x, t))
        if mode == "sde":
            x = x + math.sqrt(h * beta) * torch.randn(x.shape, generator=g, dtype=x.dtype)
        if m is not None:
            x = x * m
    return x


@torch.no_grad()
def reverse_sample(
    estimator: nn.Module,
    bundle: ConditioningBundle,
    frames: int,
    n_steps: int,
    schedule: NoiseSchedule,
    seed=None,
    mode: str = "sde",
    mel_bins: int = 80,
) -> torch.Tensor:
    """Generate ``[B, frames, mel_bins]`` normalized mels from ``N(0, I)`` noise."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    g = _as_generator(seed)
    batch = bundle.mu.shape[0]
    x_T = torch.randn((batch, frames, mel_bins), generator=g, dtype=bundle.mu.dtype)

    def score(x, t):
        tt = torch.full((batch,), t, dtype=x.dtype)
        return estimator(x, tt, bundle.mu, bundle.p, bundle.s, bundle.mask) / schedule.sigma(tt)[:, None, None]

    return reverse_integrate(score, x_T, schedule, n_steps, mode, g, bundle.mask)
