"""Speaker fine-tuning of the noise estimator with prior preservation.

Only the estimator moves. Each step combines the diffusion loss on a batch
of target-speaker utterances with ``lambda_ppl`` times the squared gap
between the tuned and the frozen pretrained estimator on a batch of clean
prior samples.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .core.checkpoint import Checkpoint, module_checkpoint
from .core.config import RunConfig
from .core.seed import generator, seed_all
from .corpus import Dataset, Utterance
from .diffusion import ConditioningBundle, NoiseSchedule, _masked_mean, diffusion_loss, forward_sample, sample_times
from .model import VoiceModel, collate, estimator_only, random_crop

log = logging.getLogger(__name__)

REFERENCE_PREFIX = "frozen_reference."


class FinetuneError(RuntimeError):
    pass


def _signature(module: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(k, tuple(v.shape)) for k, v in module.state_dict().items()]


def prior_preservation_loss(
    estimator: nn.Module,
    reference: nn.Module,
    x0: torch.Tensor,
    bundle: ConditioningBundle,
    schedule: NoiseSchedule,
    t_seed=None,
    noise_seed=None,
    t: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared gap between two estimators evaluated on the same noisy prior inputs.

    No gradient reaches ``reference``.
    """
    if _signature(estimator) != _signature(reference):
        raise ValueError("estimator and frozen reference have different architectures")
    if t is None:
        t = sample_times(x0.shape[0], schedule, t_seed, x0.dtype)
    x_t, _ = forward_sample(x0, t, schedule, noise_seed)
    if bundle.mask is not None:
        x_t = x_t * bundle.mask[..., None]
    out = estimator(x_t, t, bundle.mu, bundle.p, bundle.s, bundle.mask)
    with torch.no_grad():
        ref = reference(x_t, t, bundle.mu, bundle.p, bundle.s, bundle.mask)
    return _masked_mean((out - ref) ** 2, bundle.mask)


@dataclass
class FinetuneJob:
    base: VoiceModel
    targets: list[Utterance]
    prior_pool: list[Utterance]
    lambda_ppl: float = 1.0
    n_steps: int = 500
    lr: float = 2e-4
    seed: int = 0
    batch_size: int = 4
    prior_batch_size: int = 4
    # same-speaker reference source for prior samples; None uses the prior itself
    prior_references: Dataset | None = None
    log_every: int = 0
    # steps after which a copy of the estimator state is kept (step sweeps)
    snapshots: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.targets:
            raise ValueError("fine-tuning needs at least one target utterance")
        if self.lambda_ppl > 0 and not self.prior_pool:
            raise ValueError("prior pool must be non-empty when lambda_ppl > 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")

    @classmethod
    def from_config(cls, config: RunConfig, base, targets, prior_pool, **kw) -> "FinetuneJob":
        params = dict(
            lambda_ppl=config.lambda_ppl,
            n_steps=config.finetune_steps,
            lr=config.finetune_lr,
            seed=config.seed,
            batch_size=config.finetune_batch_size,
            prior_batch_size=config.finetune_batch_size,
        )
        params.update(kw)
        return cls(base, list(targets), list(prior_pool), **params)

    def meta(self) -> dict:
        return {
            "kind": "finetune",
            "lambda_ppl": self.lambda_ppl,
            "n_steps": self.n_steps,
            "lr": self.lr,
            "seed": self.seed,
            "targets": [u.utt_id for u in self.targets],
            "prior_pool": [u.utt_id for u in self.prior_pool],
        }


@dataclass
class _Prepared:
    """Frozen-encoder conditioning for a fixed list of utterances."""

    mels: list[torch.Tensor]
    mu: list[torch.Tensor]
    p: list[torch.Tensor]
    s: torch.Tensor | None = None


@torch.no_grad()
def _prepare(model: VoiceModel, utts: Sequence[Utterance], s: torch.Tensor | None = None) -> _Prepared:
    mels = [model.normalize(u.mel) for u in utts]
    batch = collate(model, utts, mels)
    dummy = torch.zeros(len(utts), model.config.d_s)
    bundle, _, _, _ = model.condition(batch.phonemes, batch.ph_mask, batch.durations, dummy, mel=batch.mel)
    lengths = [m.shape[0] for m in mels]
    return _Prepared(
        mels,
        [bundle.mu[i, :n] for i, n in enumerate(lengths)],
        [bundle.p[i, :n] for i, n in enumerate(lengths)],
        s,
    )


def _gather(prep: _Prepared, idx: list[int], s: torch.Tensor):
    pad = nn.utils.rnn.pad_sequence
    mels = [prep.mels[i] for i in idx]
    lengths = torch.tensor([m.shape[0] for m in mels])
    mask = torch.arange(int(lengths.max()))[None] < lengths[:, None]
    bundle = ConditioningBundle(
        pad([prep.mu[i] for i in idx], batch_first=True),
        pad([prep.p[i] for i in idx], batch_first=True),
        s,
        mask,
    )
    return pad(mels, batch_first=True), bundle


def _reference_sets(utts: Sequence[Utterance], pool: Sequence[Utterance], k: int, g: torch.Generator):
    sets = []
    for u in utts:
        others = [r for r in pool if r.speaker_id == u.speaker_id and r.utt_id != u.utt_id] or [u]
        picks = torch.randint(len(others), (k,), generator=g).tolist()
        sets.append([others[i] for i in picks])
    return sets


def finetune(job: FinetuneJob, snapshot_out: dict | None = None):
    """Run ``job``; returns ``(model, checkpoint, trace)``.

    Estimator states at ``job.snapshots`` steps are written into ``snapshot_out``.

    The checkpoint holds every model tensor (estimator trainable, the rest
    frozen) plus the frozen pretrained estimator under ``frozen_reference.``.
    """
    seed_all(job.seed)
    base = job.base
    config = base.config
    model = copy.deepcopy(base)
    model.eval()
    for name, param in model.named_parameters():
        param.requires_grad_(estimator_only(name))
    reference = copy.deepcopy(base.estimator).eval()
    for param in reference.parameters():
        param.requires_grad_(False)

    g = generator(job.seed + 7)
    k = config.k_references
    targets = _prepare(model, job.targets)
    target_mels = {u.utt_id: m for u, m in zip(job.targets, targets.mels)}

    priors = None
    if job.prior_pool:
        ref_pool = job.prior_references.utterances if job.prior_references is not None else job.prior_pool
        ref_sets = _reference_sets(job.prior_pool, ref_pool, k, g)
        with torch.no_grad():
            s_prior = model.timbre([[model.normalize(r.mel) for r in refs] for refs in ref_sets])
        priors = _prepare(model, job.prior_pool, s_prior)

    opt = torch.optim.Adam(model.estimator.parameters(), lr=job.lr)
    trace = []
    snapshots: dict[int, dict[str, torch.Tensor]] = {}
    if 0 in job.snapshots:
        snapshots[0] = copy.deepcopy(model.estimator.state_dict())
    for step in range(job.n_steps):
        idx = torch.randint(len(job.targets), (job.batch_size,), generator=g).tolist()
        items = [job.targets[i] for i in idx]
        refs = _reference_sets(items, job.targets, k, g)
        with torch.no_grad():
            s = model.timbre([[target_mels[r.utt_id] for r in rs] for rs in refs])
        x0, bundle = _gather(targets, idx, s)
        x0, bundle = random_crop(x0, bundle, config.segment_frames, g)
        l_diff = diffusion_loss(model.estimator, x0, bundle, model.schedule, g, g)

        l_ppl = torch.zeros(())
        if priors is not None:
            pidx = torch.randint(len(job.prior_pool), (job.prior_batch_size,), generator=g).tolist()
            px0, pbundle = _gather(priors, pidx, priors.s[pidx])
            px0, pbundle = random_crop(px0, pbundle, config.segment_frames, g)
            if job.lambda_ppl > 0:
                l_ppl = prior_preservation_loss(model.estimator, reference, px0, pbundle, model.schedule, g, g)
            else:
                with torch.no_grad():
                    l_ppl = prior_preservation_loss(model.estimator, reference, px0, pbundle, model.schedule, g, g)
        loss = l_diff + job.lambda_ppl * l_ppl
        if not math.isfinite(loss.item()):
            raise FinetuneError(f"non-finite loss at step {step}: diff={l_diff.item()} ppl={l_ppl.item()}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.estimator.parameters(), config.grad_clip)
        opt.step()
        trace.append({"step": step, "diff": l_diff.item(), "ppl": l_ppl.item(), "total": loss.item()})
        if job.log_every and step % job.log_every == 0:
            log.info("finetune step %d diff %.4f ppl %.5f", step, l_diff.item(), l_ppl.item())
        if step + 1 in job.snapshots:
            snapshots[step + 1] = copy.deepcopy(model.estimator.state_dict())

    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    ckpt = finetuned_checkpoint(model, reference, job.n_steps, job.meta())
    if snapshot_out is not None:
        snapshot_out.update(snapshots)
    return model, ckpt, trace


def with_estimator_state(model: VoiceModel, state: dict[str, torch.Tensor]) -> VoiceModel:
    """A copy of ``model`` whose estimator holds ``state``."""
    out = copy.deepcopy(model)
    out.estimator.load_state_dict(state)
    return out.eval()


@torch.no_grad()
def prior_gap(
    model: VoiceModel,
    reference: nn.Module,
    utterances: Sequence[Utterance],
    references: Dataset,
    seed: int = 0,
    n_draws: int = 4,
) -> float:
    """Held-out ``||eps_theta - eps_theta'||^2`` on clean utterances, fixed draws.

    ``references`` supplies same-speaker timbre references; every utterance is
    scored whole at ``n_draws`` (t, noise) draws from a generator seeded by ``seed``.
    """
    g = generator(seed)
    k = model.config.k_references
    refs = _reference_sets(utterances, references.utterances, k, g)
    s = model.timbre([[model.normalize(r.mel) for r in rs] for rs in refs])
    prep = _prepare(model, utterances, s)
    x0, bundle = _gather(prep, list(range(len(utterances))), s)
    total = 0.0
    for _ in range(n_draws):
        total += prior_preservation_loss(model.estimator, reference, x0, bundle, model.schedule, g, g).item()
    return total / n_draws


def finetuned_checkpoint(model: VoiceModel, reference: nn.Module, step: int, meta: dict) -> Checkpoint:
    ck = module_checkpoint(model, model.config, trainable=estimator_only, step=step, meta=meta)
    ref = module_checkpoint(reference, None, prefix=REFERENCE_PREFIX)
    for name, arr in ref.tensors.items():
        ck.tensors[name] = arr
        ck.roles[name] = "frozen"
    return ck


def load_finetuned(ckpt: Checkpoint) -> VoiceModel:
    """The tuned model from a fine-tune checkpoint (reference tensors ignored)."""
    base_part = Checkpoint(
        {k: v for k, v in ckpt.tensors.items() if not k.startswith(REFERENCE_PREFIX)},
        {k: r for k, r in ckpt.roles.items() if not k.startswith(REFERENCE_PREFIX)},
        ckpt.config, ckpt.step, ckpt.meta,
    )
    return VoiceModel.from_checkpoint(base_part)


@dataclass
class InferenceContext:
    model: VoiceModel
    references: list[torch.Tensor]  # normalized reference mels
    timbre: torch.Tensor  # [d_s]
    reference_ids: list[int] = field(default_factory=list)


@torch.no_grad()
def zero_shot_adapt(model: VoiceModel, references: Sequence[Utterance]) -> InferenceContext:
    """Timbre from target references without touching any weight."""
    if not references:
        raise ValueError("zero-shot adaptation needs at least one reference")
    model.eval()
    mels = [model.normalize(u.mel) for u in references]
    s = model.timbre([mels])[0]
    return InferenceContext(model, mels, s, [u.utt_id for u in references])
