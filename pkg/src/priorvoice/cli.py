"""Command-line entry point: ``priorvoice <command> [options]``.

Every command reads defaults, then ``--config``, then ``--set key=value`` and
``--seed`` overrides. Exit status is 0 on success, 1 for usage or config
errors and 2 for runtime failures (missing artifacts, bad checkpoints).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core.config import ConfigError, RunConfig, coerce_value, load_config, save_config

log = logging.getLogger("priorvoice")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="priorvoice", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    _common(p)

    p = sub.add_parser("pretrain", help="train encoders, duration predictor and estimator")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)

    p = sub.add_parser("train-plm", help="train the prosody LM and build the prompt bank")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)

    p = sub.add_parser("finetune", help="adapt the estimator to one target speaker")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--speaker", type=int, required=True)
    p.add_argument("--targets", type=Path, help="file of target utterance ids (default: first target_count)")
    p.add_argument("--clean", action="store_true", help="do not corrupt the target utterances")

    p = sub.add_parser("synthesize", help="generate a mel for phoneme text")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="base or fine-tuned checkpoint")
    p.add_argument("--plm", type=Path, required=True, help="directory written by train-plm")
    p.add_argument("--text", required=True, help="phoneme ids separated by spaces or commas")
    p.add_argument("--speaker", type=int, required=True)
    p.add_argument("--prompt-mode", choices=("prior", "target"), default="prior")
    p.add_argument("--steps", type=int, help="reverse diffusion steps")

    p = sub.add_parser("eval", help="corpus-intrinsic metrics of a synthesized mel")
    _common(p, out_required=False)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="pretrained checkpoint (timbre encoder)")
    p.add_argument("--mel", type=Path, required=True)
    p.add_argument("--speaker", type=int, required=True)
    p.add_argument("--durations", type=Path, help="predicted durations file written by synthesize")
    p.add_argument("--reference-durations", type=Path, help="ground-truth durations to compare against")

    p = sub.add_parser("suite", help="run the experiment grid")
    _common(p)
    p.add_argument("--experiments", default="ablation,zero_shot,data_scale,steps")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = (x.strip() for x in item.split("=", 1))
        overrides[key] = coerce_value(key, raw)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, **overrides)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _dataset(path: Path, config: RunConfig):
    from .corpus import load_dataset

    _need(path / "index.tsv", "corpus index")
    return load_dataset(path, config.mel_bins)


def _split(dataset, config: RunConfig):
    from .corpus import split_corpus

    return split_corpus(dataset, config.corpus_pretrain_speakers)


def _speaker_utts(dataset, speaker: int):
    utts = dataset.by_speaker(speaker)
    if not utts:
        raise UsageError(f"--speaker {speaker} has no utterances in the corpus")
    return utts


def _parse_text(text: str) -> np.ndarray:
    try:
        ids = [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--text must be integer phoneme ids, got {text!r}") from None
    if not ids:
        raise UsageError("--text is empty")
    return np.array(ids, dtype=np.int64)


def cmd_gen_corpus(args, config: RunConfig) -> None:
    from .corpus import generate_corpus, save_dataset

    ds = generate_corpus(config, config.corpus_speakers, config.corpus_utts_per_speaker, config.seed)
    save_dataset(ds, args.out)
    save_config(config, args.out / "config.txt")
    print(f"wrote {len(ds.utterances)} utterances of {len(ds.speakers)} speakers to {args.out}")


def cmd_pretrain(args, config: RunConfig) -> None:
    from .pipeline import pretrain, write_trace

    pre, _ = _split(_dataset(args.corpus, config), config)
    model, trace = pretrain(config, pre, log_every=100 if args.verbose else 0)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.to_checkpoint(step=config.pretrain_steps, meta={"kind": "base"}), args.out / "base.ckpt")
    write_trace(trace, args.out / "pretrain_trace.tsv")
    print(f"wrote {args.out / 'base.ckpt'}")


def _load_base(path: Path):
    from .model import VoiceModel

    return VoiceModel.from_checkpoint(load_checkpoint(_need(path, "checkpoint")))


def _load_any_model(path: Path):
    from .adaptation import load_finetuned

    ckpt = load_checkpoint(_need(path, "checkpoint"))
    return load_finetuned(ckpt)


def cmd_train_plm(args, config: RunConfig) -> None:
    from .pipeline import build_prompt_bank, train_plm

    model = _load_base(args.base)
    pre, _ = _split(_dataset(args.corpus, config), config)
    plm, _ = train_plm(config, model, pre, log_every=100 if args.verbose else 0)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(plm.to_checkpoint(config, step=config.plm_steps), args.out / "plm.ckpt")
    for tag, entry in build_prompt_bank(model, pre, config).items():
        save_checkpoint(entry.to_checkpoint(config), args.out / f"prompt_{tag}.ckpt")
    print(f"wrote {args.out / 'plm.ckpt'} and prompt bank")


def _targets(args, config: RunConfig, dataset):
    from .corpus import NoiseSpec, corrupt

    utts = _speaker_utts(dataset, args.speaker)
    if args.targets is not None:
        wanted = [int(x) for x in _need(args.targets, "target list").read_text().split()]
        by_id = {u.utt_id: u for u in utts}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise UsageError(f"{args.targets}: utterances {missing} are not from speaker {args.speaker}")
        chosen = [by_id[i] for i in wanted]
    else:
        chosen = utts[: config.target_count]
    if args.clean:
        return chosen
    return [corrupt(u, NoiseSpec(config.target_snr_db), seed=100_003 * (config.seed + 1) + u.utt_id) for u in chosen]


def cmd_finetune(args, config: RunConfig) -> None:
    from .adaptation import FinetuneJob, finetune
    from .corpus import select_prior_pool

    base = _load_base(args.base)
    dataset = _dataset(args.corpus, config)
    pre, _ = _split(dataset, config)
    targets = _targets(args, config, dataset)
    pool = select_prior_pool(pre, config.prior_pool_size, config.seed, config.prior_min_frames, config.prior_max_frames)
    job = FinetuneJob.from_config(config, base, targets, pool, prior_references=pre, log_every=100 if args.verbose else 0)
    _, ckpt, _ = finetune(job)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, args.out / "finetuned.ckpt")
    print(f"wrote {args.out / 'finetuned.ckpt'}")


def cmd_synthesize(args, config: RunConfig) -> None:
    from .corpus import write_mel
    from .plm import PromptEntry, ProsodyLM, encode_prompt
    from .pipeline import synthesize

    phonemes = _parse_text(args.text)
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    model = _load_any_model(args.model)
    if phonemes.max() >= model.config.vocab_size or phonemes.min() < 0:
        raise UsageError(f"--text ids must lie in [0, {model.config.vocab_size})")
    plm = ProsodyLM.from_checkpoint(load_checkpoint(_need(args.plm / "plm.ckpt", "PLM checkpoint")))
    dataset = _dataset(args.corpus, config)
    utts = _speaker_utts(dataset, args.speaker)
    references = utts[: config.k_references]
    if args.prompt_mode == "prior":
        tag = dataset.speaker(args.speaker).tag
        prompt = PromptEntry.from_checkpoint(load_checkpoint(_need(args.plm / f"prompt_{tag}.ckpt", "prompt bank entry")))
    else:
        prompt = encode_prompt(model, utts[0])
    result = synthesize(model, plm, phonemes, references, prompt, n_steps=args.steps, seed=config.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_mel(result.mel, args.out / "mel.f32")
    (args.out / "durations.txt").write_text(" ".join(str(int(d)) for d in result.durations) + "\n")
    (args.out / "codes.txt").write_text(" ".join(str(int(c)) for c in result.codes) + "\n")
    print(f"wrote {args.out / 'mel.f32'} ({result.mel.shape[0]} frames)")


def _read_ints(path: Path) -> np.ndarray:
    return np.array([int(x) for x in _need(path, "durations file").read_text().split()], dtype=np.int64)


def cmd_eval(args, config: RunConfig) -> None:
    from .corpus import read_mel
    from .pipeline import eval_metrics

    model = _load_any_model(args.model)
    mel = read_mel(_need(args.mel, "mel file"), model.config.mel_bins)
    dataset = _dataset(args.corpus, config)
    references = _speaker_utts(dataset, args.speaker)[: config.k_references]
    pred = _read_ints(args.durations) if args.durations else None
    true = _read_ints(args.reference_durations) if args.reference_durations else None
    metrics = eval_metrics(mel, model, references, pred, true)
    text = "".join(f"{k}\t{v!r}\n" for k, v in metrics.items())
    sys.stdout.write(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.tsv").write_text(text)


def cmd_suite(args, config: RunConfig) -> None:
    from .suite import EXPERIMENTS, run_experiment_suite

    experiments = tuple(x for x in args.experiments.split(",") if x)
    unknown = [x for x in experiments if x not in EXPERIMENTS]
    if unknown:
        raise UsageError(f"--experiments: unknown {unknown}; choose from {list(EXPERIMENTS)}")
    report = run_experiment_suite(config, args.out, experiments)
    print((report.run_dir / "summary.txt").read_text(), end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "train-plm": cmd_train_plm,
    "finetune": cmd_finetune,
    "synthesize": cmd_synthesize,
    "eval": cmd_eval,
    "suite": cmd_suite,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        config = resolve_config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: config key '{exc.key}': {exc}" if exc.key else f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: config key '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError) as exc:
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
