"""Desk-scale experiment grid: ablations, zero-shot vs fine-tuning, data scale
and fine-tuning steps, each reported as mean and standard error over seeds.

Protocol per seed ``i``: the target is held-out speaker ``i mod n_heldout``;
its first ``count`` utterances (corrupted at ``target_snr_db`` unless the
condition is clean) are the fine-tuning data and its first ``k_references``
of those are the synthesis references; its last ``test_sentences``
utterances provide the test texts and ground-truth durations.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adaptation import FinetuneJob, finetune, prior_gap, with_estimator_state
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.config import RunConfig, save_config
from .corpus import (
    Dataset,
    NoiseSpec,
    ToySpeaker,
    Utterance,
    corrupt,
    generate_corpus,
    select_prior_pool,
    split_corpus,
)
from .model import VoiceModel
from .pipeline import (
    SynthesisRequest,
    build_prompt_bank,
    eval_metrics,
    pretrain,
    synthesize_batch,
    train_plm,
    write_trace,
)
from .plm import PromptEntry, ProsodyLM, encode_prompt

log = logging.getLogger(__name__)

EXPERIMENTS = ("ablation", "zero_shot", "data_scale", "steps")
DATA_SCALE_COUNTS = (1, 5, 20, 100)
STEP_GRID = (0, 100, 250, 500, 1000)
METRICS = ("noise_floor", "timbre_cos", "dur_mae")


@dataclass
class Artifacts:
    config: RunConfig
    model: VoiceModel
    plm: ProsodyLM
    pretrain_set: Dataset
    heldout_set: Dataset
    bank: dict[str, PromptEntry]
    prior_pool: list[Utterance]


def prepare_artifacts(config: RunConfig, cache_dir: str | Path | None = None, log_every: int = 0) -> Artifacts:
    """Corpus, pretrained model, PLM and prompt bank; checkpoints reused from ``cache_dir``."""
    corpus = generate_corpus(config, config.corpus_speakers, config.corpus_utts_per_speaker, config.seed)
    pre, held = split_corpus(corpus, config.corpus_pretrain_speakers)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    if cache is not None and (cache / "base.ckpt").exists():
        model = VoiceModel.from_checkpoint(load_checkpoint(cache / "base.ckpt"))
    else:
        model, trace = pretrain(config, pre, log_every=log_every)
        if cache is not None:
            write_trace(trace, cache / "pretrain_trace.tsv")
            save_checkpoint(model.to_checkpoint(step=config.pretrain_steps, meta={"kind": "base"}), cache / "base.ckpt")
    if cache is not None and (cache / "plm.ckpt").exists():
        plm = ProsodyLM.from_checkpoint(load_checkpoint(cache / "plm.ckpt"))
    else:
        plm, trace = train_plm(config, model, pre, log_every=log_every)
        if cache is not None:
            write_trace(trace, cache / "plm_trace.tsv")
            save_checkpoint(plm.to_checkpoint(config, step=config.plm_steps), cache / "plm.ckpt")
    bank = build_prompt_bank(model, pre, config)
    pool = select_prior_pool(pre, config.prior_pool_size, config.seed, config.prior_min_frames, config.prior_max_frames)
    return Artifacts(config, model, plm, pre, held, bank, pool)


@dataclass
class TargetTask:
    speaker: ToySpeaker
    train: list[Utterance]  # fine-tuning data, possibly corrupted
    clean_train: list[Utterance]
    test: list[Utterance]
    noisy: bool
    k: int = 3

    @property
    def references(self) -> list[Utterance]:
        return self.train[: self.k]

    @property
    def clean_references(self) -> list[Utterance]:
        return self.clean_train[: self.k]


def make_task(art: Artifacts, seed: int, count: int, noisy: bool = True) -> TargetTask:
    c = art.config
    speakers = art.heldout_set.speakers
    speaker = speakers[seed % len(speakers)]
    utts = art.heldout_set.by_speaker(speaker.speaker_id)
    test = utts[-c.test_sentences:]
    available = utts[: len(utts) - c.test_sentences]
    if count > len(available):
        raise ValueError(f"speaker {speaker.speaker_id} has only {len(available)} fine-tuning utterances, asked {count}")
    clean = available[:count]
    if noisy:
        train = [corrupt(u, NoiseSpec(c.target_snr_db), seed=100_003 * (seed + 1) + u.utt_id) for u in clean]
    else:
        train = list(clean)
    return TargetTask(speaker, train, clean, test, noisy, c.k_references)


def _teacher_codes(art: Artifacts, tag: str) -> PromptEntry:
    """Codes of a held-out clean utterance of the prior prompt speaker (w/o PLM ablation)."""
    prompt = art.bank[tag]
    speaker = art.pretrain_set.utterance(prompt.utt_id).speaker_id
    candidates = [u for u in art.pretrain_set.by_speaker(speaker) if u.utt_id != prompt.utt_id]
    return encode_prompt(art.model, candidates[-1])


def evaluate(
    art: Artifacts,
    model: VoiceModel,
    task: TargetTask,
    prompt_mode: str,
    seed: int,
) -> dict[str, list[float]]:
    """Per-sentence metrics of ``model`` on the task's test texts.

    ``prompt_mode`` is ``prior`` (prompt bank, tag-matched), ``target`` (prompt
    built from the first fine-tuning utterance) or ``teacher`` (no PLM; codes of
    a held-out clean utterance of the prior prompt speaker).
    """
    tag = task.speaker.tag
    requests = []
    for utt in task.test:
        if prompt_mode == "prior":
            req = SynthesisRequest(utt.phonemes, task.references, art.bank[tag])
        elif prompt_mode == "target":
            req = SynthesisRequest(utt.phonemes, task.references, encode_prompt(model, task.train[0]))
        elif prompt_mode == "teacher":
            req = SynthesisRequest(utt.phonemes, task.references, codes=_teacher_codes(art, tag).codes.numpy())
        else:
            raise ValueError(f"unknown prompt mode {prompt_mode!r}")
        requests.append(req)
    results = synthesize_batch(model, art.plm, requests, seed=seed)
    out: dict[str, list[float]] = {m: [] for m in METRICS}
    for utt, res in zip(task.test, results):
        metrics = eval_metrics(res.mel, art.model, task.clean_references, res.durations, utt.durations)
        for m in METRICS:
            out[m].append(metrics[m])
    return out


@dataclass
class Record:
    experiment: str
    system: str
    seed: int
    count: int
    steps: int
    condition: str
    metrics: dict[str, list[float]]
    prior_gap: float | None = None

    def mean(self, metric: str) -> float:
        if metric == "prior_gap":
            return float("nan") if self.prior_gap is None else self.prior_gap
        return float(np.mean(self.metrics[metric]))


@dataclass
class Report:
    config: RunConfig
    records: list[Record] = field(default_factory=list)
    run_dir: Path | None = None
    timings: dict = field(default_factory=dict)

    def select(self, experiment: str, system: str | None = None, **match) -> list[Record]:
        out = [r for r in self.records if r.experiment == experiment and (system is None or r.system == system)]
        for key, value in match.items():
            out = [r for r in out if getattr(r, key) == value]
        return sorted(out, key=lambda r: r.seed)

    def per_seed(self, experiment: str, system: str, metric: str, **match) -> np.ndarray:
        return np.array([r.mean(metric) for r in self.select(experiment, system, **match)])

    def to_json(self) -> str:
        rows = [r.__dict__ for r in self.records]
        return json.dumps({"config": self.config.to_dict(), "records": rows}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        blob = json.loads(text)
        return cls(RunConfig.from_dict(blob["config"]), [Record(**r) for r in blob["records"]])


class _Tuner:
    """Fine-tuned models for one seed, shared across experiments."""

    def __init__(self, art: Artifacts, seed: int):
        self.art = art
        self.seed = seed
        self.cache: dict[tuple, dict[int, dict]] = {}
        self.tasks: dict[tuple, TargetTask] = {}

    def task(self, count: int, noisy: bool) -> TargetTask:
        key = (count, noisy)
        if key not in self.tasks:
            self.tasks[key] = make_task(self.art, self.seed, count, noisy)
        return self.tasks[key]

    def model(self, lam: float, count: int, noisy: bool, steps: int | None = None) -> VoiceModel:
        c = self.art.config
        steps = c.finetune_steps if steps is None else steps
        key = (lam, count, noisy)
        states = self.cache.get(key, {})
        if steps not in states:
            grid = tuple(sorted(set(states) | {steps, c.finetune_steps}))
            job = FinetuneJob.from_config(
                c, self.art.model, self.task(count, noisy).train, self.art.prior_pool,
                lambda_ppl=lam, seed=self.seed, n_steps=max(grid), snapshots=grid,
                prior_references=self.art.pretrain_set,
            )
            states = {}
            finetune(job, states)
            self.cache[key] = states
        return with_estimator_state(self.art.model, states[steps])


def heldout_prior(art: Artifacts, n: int = 16) -> list[Utterance]:
    """Clean pretraining-speaker utterances outside the prior pool."""
    used = {u.utt_id for u in art.prior_pool}
    candidates = [u for u in art.pretrain_set.utterances if u.utt_id not in used]
    step = max(1, len(candidates) // n)
    return candidates[::step][:n]


def _gap(art: Artifacts, model: VoiceModel, seed: int) -> float:
    return prior_gap(model, art.model.estimator, heldout_prior(art), art.pretrain_set, seed=seed)


def run_seed(
    art: Artifacts, seed: int, experiments: Iterable[str] = EXPERIMENTS, timings: dict | None = None
) -> list[Record]:
    """All records for one seed; wall-clock seconds per experiment go into ``timings``."""
    c = art.config
    experiments = tuple(experiments)
    tuner = _Tuner(art, seed)
    records: list[Record] = []
    base_count = c.target_count

    def add(experiment, system, model, task, prompt, count=base_count, steps=c.finetune_steps, gap=False):
        metrics = evaluate(art, model, task, prompt, seed)
        records.append(
            Record(
                experiment, system, seed, count, steps, "noisy" if task.noisy else "clean",
                metrics, _gap(art, model, seed) if gap else None,
            )
        )
        log.info("seed %d %s/%s count=%d steps=%d nf=%.4f tc=%.4f", seed, experiment, system, count, steps,
                 np.mean(metrics["noise_floor"]), np.mean(metrics["timbre_cos"]))

    timings = {} if timings is None else timings
    clock = [time.perf_counter()]

    def lap(name):
        now = time.perf_counter()
        timings[(seed, name)] = now - clock[0]
        clock[0] = now

    noisy = tuner.task(base_count, True)
    if "steps" in experiments:
        for steps in STEP_GRID:
            add("steps", "stable", tuner.model(1.0, base_count, True, steps), noisy, "prior", steps=steps, gap=True)
        lap("steps")
    if "ablation" in experiments:
        stable = tuner.model(1.0, base_count, True)
        plain = tuner.model(0.0, base_count, True)
        add("ablation", "stable", stable, noisy, "prior", gap=True)
        add("ablation", "wo_plm", stable, noisy, "teacher")
        add("ablation", "wo_pp", plain, noisy, "prior", gap=True)
        add("ablation", "wo_prior_prompt", stable, noisy, "target")
        add("ablation", "wo_pp_wo_prior_prompt", plain, noisy, "target")
        lap("ablation")
    if "zero_shot" in experiments:
        clean = tuner.task(base_count, False)
        add("zero_shot", "zero_shot", art.model, clean, "prior")
        add("zero_shot", "finetuned", tuner.model(1.0, base_count, False), clean, "prior")
        add("zero_shot", "zero_shot", art.model, noisy, "prior")
        add("zero_shot", "finetuned", tuner.model(1.0, base_count, True), noisy, "prior")
        lap("zero_shot")
    if "data_scale" in experiments:
        for count in DATA_SCALE_COUNTS:
            task = tuner.task(count, True)
            add("data_scale", "stable", tuner.model(1.0, count, True), task, "prior", count=count)
            add("data_scale", "wo_pp_wo_prior_prompt", tuner.model(0.0, count, True), task, "target", count=count)
        lap("data_scale")
    return records


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")
    return float(v.mean()), se


def table(report: Report, experiment: str, metrics: Sequence[str] = METRICS + ("prior_gap",)) -> str:
    """Tab-separated table, one row per (system, condition, count, steps)."""
    keys = []
    for r in report.records:
        if r.experiment == experiment:
            key = (r.system, r.condition, r.count, r.steps)
            if key not in keys:
                keys.append(key)
    header = ["system", "condition", "count", "steps", "n_seeds"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_se"]
    lines = ["\t".join(header)]
    for system, condition, count, steps in keys:
        rows = report.select(experiment, system, condition=condition, count=count, steps=steps)
        cells = [system, condition, str(count), str(steps), str(len(rows))]
        for m in metrics:
            mean, se = _mean_se([r.mean(m) for r in rows])
            cells += [f"{mean:.6g}", f"{se:.6g}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def summary(report: Report) -> str:
    lines = [f"config digest {report.config.digest()}", f"seeds {sorted({r.seed for r in report.records})}"]
    for experiment in EXPERIMENTS:
        if any(r.experiment == experiment for r in report.records):
            lines += ["", f"[{experiment}]", table(report, experiment, ("noise_floor", "timbre_cos")).rstrip()]
    return "\n".join(lines) + "\n"


def write_report(report: Report, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(report.config, run_dir / "config.txt")
    for experiment in EXPERIMENTS:
        if any(r.experiment == experiment for r in report.records):
            (run_dir / f"{experiment}.tsv").write_text(table(report, experiment))
    (run_dir / "records.json").write_text(report.to_json())
    (run_dir / "summary.txt").write_text(summary(report))
    report.run_dir = run_dir
    return run_dir


def load_report(run_dir: str | Path) -> Report:
    report = Report.from_json((Path(run_dir) / "records.json").read_text())
    report.run_dir = Path(run_dir)
    return report


def run_experiment_suite(
    config: RunConfig,
    out_root: str | Path,
    experiments: Iterable[str] = EXPERIMENTS,
    seeds: Sequence[int] | None = None,
    artifacts: Artifacts | None = None,
) -> Report:
    """Run the grid and write it under ``out_root/<config digest>``."""
    experiments = tuple(experiments)
    unknown = set(experiments) - set(EXPERIMENTS)
    if unknown:
        raise ValueError(f"unknown experiments {sorted(unknown)}")
    run_dir = Path(out_root) / config.digest()
    art = artifacts if artifacts is not None else prepare_artifacts(config, run_dir)
    seeds = list(range(config.seed, config.seed + config.suite_seeds)) if seeds is None else list(seeds)
    report = Report(config)
    timings: dict = {}
    for seed in seeds:
        report.records.extend(run_seed(art, seed, experiments, timings))
    write_report(report, run_dir)
    # wall-clock only; kept apart from the deterministic tables
    with open(run_dir / "timing.tsv", "w") as fh:
        fh.write("seed\texperiment\tseconds\n")
        for (seed, name), sec in timings.items():
            fh.write(f"{seed}\t{name}\t{sec:.1f}\n")
    report.timings = timings
    return report
