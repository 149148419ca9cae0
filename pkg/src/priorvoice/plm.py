"""Decoder-only prosody language model over phoneme-level prosody codes.

A training/decoding sequence is ``prompt ++ target``. Position ``i`` carries
the projected text hidden of phoneme ``i`` plus the embedding of the previous
code (a start token at position 0), a learned position embedding and a
prompt/target segment embedding; the output at ``i`` predicts code ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core.checkpoint import Checkpoint, load_module_state, module_checkpoint
from .core.config import RunConfig

PROMPT, TARGET = 0, 1


class ProsodyLM(nn.Module):
    def __init__(self, d_h: int, codebook_size: int, dim: int = 128, layers: int = 4, heads: int = 4, max_len: int = 128):
        super().__init__()
        self.codebook_size = codebook_size
        self.start = codebook_size
        self.max_len = max_len
        self.text_proj = nn.Linear(d_h, dim)
        self.code_embed = nn.Embedding(codebook_size + 1, dim)
        self.pos_embed = nn.Embedding(max_len, dim)
        self.seg_embed = nn.Embedding(2, dim)
        layer = nn.TransformerEncoderLayer(
            dim, heads, 4 * dim, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
        )
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, codebook_size)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
                if isinstance(m, nn.Linear) and m.bias is not None:
                    nn.init.zeros_(m.bias)

    @classmethod
    def from_config(cls, config: RunConfig) -> "ProsodyLM":
        return cls(config.d_h, config.codebook_size, config.plm_dim, config.plm_layers, config.plm_heads, config.plm_max_len)

    def forward(self, text: torch.Tensor, code_in: torch.Tensor, segment: torch.Tensor) -> torch.Tensor:
        """Causal logits ``[B, L, codebook_size]``; padding must sit at the end."""
        length = text.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence of {length} exceeds max_len {self.max_len}")
        pos = torch.arange(length)
        h = self.text_proj(text) + self.code_embed(code_in) + self.pos_embed(pos)[None] + self.seg_embed(segment)
        causal = nn.Transformer.generate_square_subsequent_mask(length, dtype=h.dtype)
        h = self.blocks(h, mask=causal, is_causal=True)
        return self.head(self.norm(h))

    def to_checkpoint(self, config: RunConfig | None, step: int = 0) -> Checkpoint:
        return module_checkpoint(self, config, step=step, meta={"kind": "plm"})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ProsodyLM":
        plm = cls.from_config(ckpt.config)
        load_module_state(plm, ckpt)
        plm.eval()
        return plm


def _check_codes(codes: torch.Tensor, codebook_size: int) -> None:
    if codes.numel() and (codes.min() < 0 or codes.max() >= codebook_size):
        raise ValueError(f"prosody code outside [0, {codebook_size}): max {int(codes.max())}")


def build_sequence(prompt_mu, prompt_codes, target_mu, target_codes, start: int):
    """Inputs for one ``prompt ++ target`` sequence: ``(text, code_in, segment)``."""
    text = torch.cat([prompt_mu, target_mu], dim=0)
    codes = torch.cat([prompt_codes, target_codes])
    code_in = torch.cat([torch.tensor([start]), codes])[: text.shape[0]]
    segment = torch.cat(
        [torch.full((len(prompt_codes),), PROMPT), torch.full((len(target_mu),), TARGET)]
    )
    return text, code_in, segment


@dataclass
class PlmExample:
    prompt_mu: torch.Tensor  # [Lp, d_h]
    prompt_codes: torch.Tensor  # [Lp]
    target_mu: torch.Tensor  # [Lt, d_h]
    target_codes: torch.Tensor  # [Lt]


def plm_loss(plm: ProsodyLM, batch: Sequence[PlmExample]) -> torch.Tensor:
    """Next-code cross-entropy averaged over target positions only."""
    texts, code_ins, segs, labels = [], [], [], []
    for ex in batch:
        _check_codes(ex.prompt_codes, plm.codebook_size)
        _check_codes(ex.target_codes, plm.codebook_size)
        text, code_in, seg = build_sequence(ex.prompt_mu, ex.prompt_codes, ex.target_mu, ex.target_codes, plm.start)
        ignore = torch.full((len(ex.prompt_codes),), -100)
        texts.append(text)
        code_ins.append(code_in)
        segs.append(seg)
        labels.append(torch.cat([ignore, ex.target_codes]))
    pad = nn.utils.rnn.pad_sequence
    logits = plm(
        pad(texts, batch_first=True),
        pad(code_ins, batch_first=True),
        pad(segs, batch_first=True),
    )
    target = pad(labels, batch_first=True, padding_value=-100)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), ignore_index=-100)


def plm_train_step(plm: ProsodyLM, batch: Sequence[PlmExample], optimizer: torch.optim.Optimizer, grad_clip: float = 1.0) -> float:
    plm.train()
    loss = plm_loss(plm, batch)
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(plm.parameters(), grad_clip)
    optimizer.step()
    return loss.item()


@dataclass
class PromptEntry:
    mu: torch.Tensor  # [Lp, d_h] phoneme-level text hidden
    codes: torch.Tensor  # [Lp]
    utt_id: int = -1
    tag: str = ""

    def to_checkpoint(self, config: RunConfig | None) -> Checkpoint:
        tensors = {"mu": self.mu.detach().numpy(), "codes": self.codes.numpy().astype(np.float32)}
        return Checkpoint(
            tensors, {"mu": "frozen", "codes": "frozen"}, config,
            meta={"kind": "prompt", "utt_id": self.utt_id, "tag": self.tag},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PromptEntry":
        return cls(
            torch.from_numpy(ckpt.tensors["mu"].copy()),
            torch.from_numpy(ckpt.tensors["codes"].astype(np.int64)),
            int(ckpt.meta.get("utt_id", -1)),
            str(ckpt.meta.get("tag", "")),
        )


@torch.no_grad()
def build_prompt(model, utt) -> PromptEntry:
    """Phoneme-level text hidden and prosody codes of a clean prompt utterance."""
    if not utt.clean:
        raise ValueError(f"prompt utterance {utt.utt_id} must be clean")
    return encode_prompt(model, utt)


@torch.no_grad()
def encode_prompt(model, utt) -> PromptEntry:
    """Like :func:`build_prompt` without the cleanliness check (target-prompt ablation)."""
    model.eval()
    ph = torch.as_tensor(utt.phonemes)[None]
    dur = torch.as_tensor(utt.durations)[None]
    mel = model.normalize(utt.mel)[None]
    mask = torch.ones_like(ph, dtype=torch.bool)
    mu = model.text_encoder(ph, mask)[0]
    codes, _, _ = model.prosody_encoder(mel, torch.ones(mel.shape[:2], dtype=torch.bool), dur)
    return PromptEntry(mu.clone(), codes[0].clone(), utt.utt_id, utt.tag)


def pick_greedy(logits: torch.Tensor) -> int:
    """Argmax; ``torch.argmax`` returns the first (lowest-index) maximum."""
    return int(torch.argmax(logits))


def pick_topk(logits: torch.Tensor, g: torch.Generator, k: int = 5, temperature: float = 0.7) -> int:
    values, indices = torch.topk(logits / temperature, k)
    choice = torch.multinomial(torch.softmax(values, -1), 1, generator=g)
    return int(indices[choice])


@torch.no_grad()
def plm_decode(plm: nn.Module, prompt: PromptEntry, target_mu: torch.Tensor, mode: str = "greedy", seed: int = 0) -> np.ndarray:
    """Left-to-right code generation, one code per target phoneme.

    Step ``i`` only sees the prompt and target text up to phoneme ``i``.
    """
    if target_mu.shape[0] == 0:
        raise ValueError("empty target text")
    if mode not in ("greedy", "topk"):
        raise ValueError(f"unknown decode mode {mode!r}")
    codebook_size = plm.codebook_size
    _check_codes(prompt.codes, codebook_size)
    plm.eval()
    g = torch.Generator()
    g.manual_seed(seed)
    codes: list[int] = []
    for i in range(target_mu.shape[0]):
        text, code_in, seg = build_sequence(
            prompt.mu, prompt.codes, target_mu[: i + 1], torch.tensor(codes, dtype=torch.long), plm.start
        )
        logits = plm(text[None], code_in[None], seg[None])[0, -1]
        codes.append(pick_greedy(logits) if mode == "greedy" else pick_topk(logits, g))
    return np.array(codes, dtype=np.int64)
