"""Training and inference lifecycle: pretraining, PLM training, synthesis and
the corpus-intrinsic evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core.config import RunConfig
from .core.seed import generator, seed_all
from .corpus import Dataset, Utterance
from .diffusion import diffusion_loss, reverse_sample
from .model import VoiceModel, collate, random_crop
from .plm import PromptEntry, ProsodyLM, build_prompt, plm_decode, plm_train_step

log = logging.getLogger(__name__)


def _same_speaker_refs(utt: Utterance, pool: list[Utterance], k: int, g: torch.Generator) -> list[Utterance]:
    others = [u for u in pool if u.utt_id != utt.utt_id] or [utt]
    picks = torch.randint(len(others), (k,), generator=g).tolist()
    return [others[i] for i in picks]


def pretrain(config: RunConfig, dataset: Dataset, steps: int | None = None, log_every: int = 100):
    """Jointly train encoders, duration predictor and estimator on clean data.

    Loss per step is diffusion + VQ commitment + log-duration squared error.
    Returns ``(model, trace)`` with one dict of losses per step.
    """
    if len(dataset.speakers) < 2:
        raise ValueError("pretraining needs at least two speakers")
    if not all(u.clean for u in dataset.utterances):
        raise ValueError("pretraining split must be clean")
    steps = config.pretrain_steps if steps is None else steps
    seed_all(config.seed)
    model = VoiceModel(config)
    model.fit_normalization([u.mel for u in dataset.utterances])
    model.train()
    utts = dataset.utterances
    mels = {u.utt_id: model.normalize(u.mel) for u in utts}
    by_speaker = {sid: dataset.by_speaker(sid) for sid in dataset.speaker_ids}
    g = generator(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    trace = []
    for step in range(steps):
        picks = torch.randint(len(utts), (config.batch_size,), generator=g).tolist()
        items = [utts[i] for i in picks]
        refs = [
            [mels[r.utt_id] for r in _same_speaker_refs(u, by_speaker[u.speaker_id], config.k_references, g)]
            for u in items
        ]
        batch = collate(model, items, [mels[u.utt_id] for u in items])
        s = model.timbre(refs)
        bundle, mu_ph, _, vq = model.condition(batch.phonemes, batch.ph_mask, batch.durations, s, mel=batch.mel)
        log_d = model.duration_predictor(mu_ph, batch.ph_mask)
        target = torch.log(batch.durations.clamp(min=1).float())
        dur_loss = ((log_d - target) ** 2 * batch.ph_mask).sum() / batch.ph_mask.sum()
        x0, crop = random_crop(batch.mel, bundle, config.segment_frames, g)
        l_diff = diffusion_loss(model.estimator, x0, crop, model.schedule, g, g)
        loss = l_diff + vq["commitment"] + dur_loss
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        trace.append(
            {
                "step": step,
                "diff": l_diff.item(),
                "commitment": vq["commitment"].item(),
                "codebook": float(vq["codebook"]),
                "duration": dur_loss.item(),
            }
        )
        if log_every and step % log_every == 0:
            log.info("pretrain step %d diff %.4f dur %.4f", step, l_diff.item(), dur_loss.item())
    model.eval()
    return model, trace


def write_trace(trace: Sequence[dict], path) -> None:
    """One row per step, columns in first-row order."""
    keys = list(trace[0]) if trace else ["step"]
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in trace:
            fh.write("\t".join(repr(row[k]) for k in keys) + "\n")


def read_trace(path) -> list[dict]:
    lines = open(path).read().splitlines()
    keys = lines[0].split("\t")
    return [{k: (int(v) if k == "step" else float(v)) for k, v in zip(keys, line.split("\t"))} for line in lines[1:]]


@torch.no_grad()
def encode_corpus(model: VoiceModel, utterances: Sequence[Utterance]) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    """Frozen ``(text hidden, prosody codes)`` per utterance id."""
    from .plm import encode_prompt

    out = {}
    for u in utterances:
        entry = encode_prompt(model, u)
        out[u.utt_id] = (entry.mu, entry.codes)
    return out


def train_plm(config: RunConfig, model: VoiceModel, dataset: Dataset, steps: int | None = None, log_every: int = 100):
    """Fit the prosody LM on ``prompt ++ target`` pairs drawn from the same speaker.

    Codes come from the frozen pretrained prosody encoder. Returns ``(plm, trace)``.
    """
    from .plm import PlmExample

    steps = config.plm_steps if steps is None else steps
    seed_all(config.seed + 11)
    encoded = encode_corpus(model, dataset.utterances)
    by_speaker = {sid: dataset.by_speaker(sid) for sid in dataset.speaker_ids}
    plm = ProsodyLM.from_config(config)
    opt = torch.optim.Adam(plm.parameters(), lr=config.plm_lr)
    g = generator(config.seed + 12)
    utts = dataset.utterances
    trace = []
    for step in range(steps):
        batch = []
        for i in torch.randint(len(utts), (config.plm_batch_size,), generator=g).tolist():
            target = utts[i]
            others = [u for u in by_speaker[target.speaker_id] if u.utt_id != target.utt_id] or [target]
            prompt = others[int(torch.randint(len(others), (1,), generator=g))]
            pm, pc = encoded[prompt.utt_id]
            tm, tc = encoded[target.utt_id]
            batch.append(PlmExample(pm, pc, tm, tc))
        loss = plm_train_step(plm, batch, opt, config.grad_clip)
        trace.append({"step": step, "ce": loss})
        if log_every and step % log_every == 0:
            log.info("plm step %d ce %.4f", step, loss)
    plm.eval()
    return plm, trace


def build_prompt_bank(model: VoiceModel, dataset: Dataset, config: RunConfig) -> dict[str, PromptEntry]:
    from .corpus import select_prompt_bank

    chosen = select_prompt_bank(dataset, config.prior_min_frames, config.prior_max_frames)
    return {tag: build_prompt(model, utt) for tag, utt in chosen.items()}


@dataclass
class SynthesisRequest:
    phonemes: np.ndarray
    references: list[Utterance]
    prompt: PromptEntry | None = None
    # explicit prosody codes bypass the PLM (teacher-forced ablation)
    codes: np.ndarray | None = None


@dataclass
class SynthesisResult:
    mel: np.ndarray
    durations: np.ndarray
    codes: np.ndarray


@torch.no_grad()
def synthesize_batch(
    model: VoiceModel,
    plm: ProsodyLM | None,
    requests: Sequence[SynthesisRequest],
    n_steps: int | None = None,
    seed: int = 0,
    mode: str | None = None,
) -> list[SynthesisResult]:
    """Durations -> PLM codes -> timbre -> reverse diffusion, for a padded batch."""
    config = model.config
    n_steps = config.sample_steps if n_steps is None else n_steps
    mode = config.sample_mode if mode is None else mode
    model.eval()
    phs, durs, codes = [], [], []
    for req in requests:
        ph = torch.as_tensor(np.asarray(req.phonemes, dtype=np.int64))
        if ph.numel() == 0:
            raise ValueError("empty text")
        mu = model.text_encoder(ph)
        durs.append(model.duration_predictor.predict(mu))
        if req.codes is not None:
            c = np.resize(np.asarray(req.codes, dtype=np.int64), len(ph))
        else:
            if plm is None or req.prompt is None:
                raise ValueError("synthesis without explicit codes needs a PLM and a prompt")
            c = plm_decode(plm, req.prompt, mu)
        phs.append(ph)
        codes.append(torch.as_tensor(c))
    pad = torch.nn.utils.rnn.pad_sequence
    phonemes = pad(phs, batch_first=True)
    durations = pad(durs, batch_first=True)
    ph_mask = durations > 0
    s = model.timbre([[model.normalize(r.mel) for r in req.references] for req in requests])
    bundle, _, _, _ = model.condition(phonemes, ph_mask, durations, s, codes=pad(codes, batch_first=True))
    x = reverse_sample(
        model.estimator, bundle, bundle.frames, n_steps, model.schedule, seed, mode, config.mel_bins
    )
    out = []
    for i, d in enumerate(durs):
        frames = int(d.sum())
        out.append(SynthesisResult(model.denormalize(x[i, :frames]), d.numpy(), codes[i].numpy()))
    return out


def synthesize(
    model: VoiceModel,
    plm: ProsodyLM | None,
    phonemes,
    references: list[Utterance],
    prompt: PromptEntry | None = None,
    codes=None,
    n_steps: int | None = None,
    seed: int = 0,
    mode: str | None = None,
) -> SynthesisResult:
    req = SynthesisRequest(np.asarray(phonemes), list(references), prompt, codes)
    return synthesize_batch(model, plm, [req], n_steps, seed, mode)[0]


def noise_floor(mel: np.ndarray, content_bins: int = 60) -> float:
    """Mean energy (squared value) in the content-free bins."""
    band = np.asarray(mel, dtype=np.float64)[:, content_bins:]
    return float(np.mean(band**2))


@torch.no_grad()
def timbre_cosine(model: VoiceModel, mel: np.ndarray, references: Sequence[Utterance]) -> float:
    a = model.timbre([[model.normalize(mel)]])[0]
    b = model.timbre([[model.normalize(r.mel) for r in references]])[0]
    return float(F.cosine_similarity(a.double(), b.double(), dim=0))


def eval_metrics(
    mel: np.ndarray,
    model: VoiceModel,
    references: Sequence[Utterance],
    predicted_durations=None,
    true_durations=None,
) -> dict[str, float]:
    metrics = {
        "noise_floor": noise_floor(mel, model.config.content_bins),
        "timbre_cos": timbre_cosine(model, mel, references),
    }
    if predicted_durations is not None and true_durations is not None:
        p = np.asarray(predicted_durations, dtype=np.float64)
        t = np.asarray(true_durations, dtype=np.float64)
        metrics["dur_mae"] = float(np.mean(np.abs(p - t)))
    return metrics
