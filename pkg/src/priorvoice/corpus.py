"""Deterministic synthetic speech corpus.

Every phoneme owns a fixed spectral template confined to the content bins
``[0, content_bins)``; speakers colour it with a smooth per-bin log gain and a
small formant shift, and per-phoneme prosody classes paint a pitch/energy
contour into the low band. Bins ``[content_bins, mel_bins)`` of a clean
utterance are exactly zero, so any energy there in a synthesized mel is noise
leakage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .core.config import RunConfig
from .core.types import check_durations, check_mel

TAGS = ("A", "B")
PITCH_BASE = {"A": 4.0, "B": 8.0}

# (pitch offset at phoneme start, pitch slope over the phoneme, energy scale)
PROSODY_CONTOURS = [
    (0.0, 0.0, 1.0),
    (0.0, 3.0, 1.25),
    (2.0, -3.0, 0.85),
    (3.0, 0.0, 1.5),
    (1.0, 2.0, 0.7),
    (-1.0, 2.0, 1.1),
    (2.0, -2.0, 1.35),
    (0.0, -1.0, 0.6),
]


@dataclass
class ToySpeaker:
    speaker_id: int
    tag: str
    timbre_gain: np.ndarray
    formant_shift: int
    pitch_base: float
    style: np.ndarray  # [n_classes, n_classes] prosody-class transition matrix

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown gender tag {self.tag!r}")
        if not -3 <= self.formant_shift <= 3:
            raise ValueError("formant_shift must lie in [-3, 3]")
        if not np.all(np.isfinite(self.timbre_gain)):
            raise ValueError("timbre_gain must be finite")


@dataclass
class Utterance:
    utt_id: int
    speaker_id: int
    tag: str
    phonemes: np.ndarray
    durations: np.ndarray
    prosody: np.ndarray
    mel: np.ndarray
    clean: bool = True
    noise: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mel = check_mel(self.mel, self.mel.shape[1] if np.ndim(self.mel) == 2 else 80)
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = check_durations(self.durations, self.frames, len(self.phonemes))
        self.prosody = np.asarray(self.prosody, dtype=np.int64)
        if len(self.prosody) != len(self.phonemes):
            raise ValueError("one prosody class per phoneme required")

    @property
    def frames(self) -> int:
        return int(self.mel.shape[0])


@dataclass
class Dataset:
    speakers: list[ToySpeaker]
    utterances: list[Utterance]

    def speaker(self, speaker_id: int) -> ToySpeaker:
        for spk in self.speakers:
            if spk.speaker_id == speaker_id:
                return spk
        raise KeyError(f"no speaker {speaker_id}")

    def by_speaker(self, speaker_id: int) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def utterance(self, utt_id: int) -> Utterance:
        for u in self.utterances:
            if u.utt_id == utt_id:
                return u
        raise KeyError(f"no utterance {utt_id}")

    def subset(self, speaker_ids: Iterable[int]) -> "Dataset":
        keep = set(speaker_ids)
        return Dataset(
            [s for s in self.speakers if s.speaker_id in keep],
            [u for u in self.utterances if u.speaker_id in keep],
        )

    @property
    def speaker_ids(self) -> list[int]:
        return [s.speaker_id for s in self.speakers]


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    kind: str = "broadband"
    clip_level: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if self.kind not in ("broadband", "babble"):
            raise ValueError(f"unknown noise kind {self.kind!r}")


@dataclass
class _Language:
    templates: np.ndarray  # [vocab, content_bins]
    mean_durations: np.ndarray  # [vocab]
    class_bias: np.ndarray  # [vocab, n_classes]


def _language(config: RunConfig, rng: np.random.Generator) -> _Language:
    bins = np.arange(config.content_bins)
    templates = np.zeros((config.vocab_size, config.content_bins))
    for v in range(config.vocab_size):
        for _ in range(rng.integers(2, 4)):
            centre = rng.uniform(config.prosody_band, config.content_bins - 5)
            width = rng.uniform(1.5, 4.0)
            templates[v] += rng.uniform(0.6, 1.5) * np.exp(-0.5 * ((bins - centre) / width) ** 2)
    mean_durations = rng.uniform(3.0, 7.0, size=config.vocab_size)
    class_bias = rng.dirichlet(np.ones(config.n_prosody_classes), size=config.vocab_size)
    return _Language(templates, mean_durations, class_bias)


def _speaker(speaker_id: int, config: RunConfig, rng: np.random.Generator) -> ToySpeaker:
    tag = TAGS[speaker_id % 2]
    b = np.arange(config.mel_bins)
    gain = np.zeros(config.mel_bins)
    for j in range(1, 4):
        gain += rng.normal(0.0, 0.3) * np.cos(2 * np.pi * j * b / config.mel_bins + rng.uniform(0, 2 * np.pi))
    n = config.n_prosody_classes
    return ToySpeaker(
        speaker_id=speaker_id,
        tag=tag,
        timbre_gain=gain,
        formant_shift=int(rng.integers(-3, 4)),
        pitch_base=PITCH_BASE[tag] + rng.uniform(-1.0, 1.0),
        style=rng.dirichlet(np.full(n, 0.6), size=n),
    )


def _shifted(template: np.ndarray, shift: int) -> np.ndarray:
    out = np.zeros_like(template)
    if shift >= 0:
        out[shift:] = template[: len(template) - shift]
    else:
        out[:shift] = template[-shift:]
    return out


def render_mel(
    phonemes: np.ndarray,
    durations: np.ndarray,
    prosody: np.ndarray,
    speaker: ToySpeaker,
    lang: _Language,
    config: RunConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    frames = int(durations.sum())
    energy = np.zeros((frames, config.mel_bins))
    content = np.arange(config.content_bins)
    gain = np.exp(speaker.timbre_gain[: config.content_bins])
    f = 0
    for ph, dur, cls in zip(phonemes, durations, prosody):
        spectrum = _shifted(lang.templates[ph], speaker.formant_shift)
        start, slope, scale = PROSODY_CONTOURS[cls]
        for j in range(dur):
            pos = (j + 0.5) / dur
            pitch = speaker.pitch_base + start + slope * pos
            harmonic = 2.0 * np.exp(-0.5 * (content - pitch) ** 2)
            harmonic[config.prosody_band :] = 0.0
            jitter = math.exp(0.05 * rng.standard_normal())
            energy[f, : config.content_bins] = (spectrum + harmonic) * gain * scale * jitter
            f += 1
    return np.log1p(energy).astype(np.float32)


def generate_corpus(config: RunConfig, n_speakers: int, n_utts_per_speaker: int, seed: int) -> Dataset:
    """Build a clean multi-speaker corpus; a pure function of its arguments."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers (one per gender tag)")
    if config.n_prosody_classes > len(PROSODY_CONTOURS):
        raise ValueError(f"at most {len(PROSODY_CONTOURS)} prosody classes supported")
    rng = np.random.default_rng(seed)
    lang = _language(config, rng)
    speakers = [_speaker(i, config, rng) for i in range(n_speakers)]
    utterances = []
    for spk in speakers:
        for j in range(n_utts_per_speaker):
            n_ph = int(rng.integers(config.min_phonemes, config.max_phonemes + 1))
            phonemes = rng.integers(0, config.vocab_size, size=n_ph)
            durations = np.clip(
                np.rint(lang.mean_durations[phonemes] + rng.normal(0.0, 0.8, size=n_ph)), 2, 8
            ).astype(np.int64)
            prosody = np.empty(n_ph, dtype=np.int64)
            prev = int(rng.integers(config.n_prosody_classes))
            for i, ph in enumerate(phonemes):
                p = spk.style[prev] * lang.class_bias[ph]
                prev = int(rng.choice(config.n_prosody_classes, p=p / p.sum()))
                prosody[i] = prev
            mel = render_mel(phonemes, durations, prosody, spk, lang, config, rng)
            utterances.append(
                Utterance(
                    utt_id=spk.speaker_id * n_utts_per_speaker + j,
                    speaker_id=spk.speaker_id,
                    tag=spk.tag,
                    phonemes=phonemes,
                    durations=durations,
                    prosody=prosody,
                    mel=mel,
                )
            )
    return Dataset(speakers, utterances)


def split_corpus(dataset: Dataset, n_pretrain_speakers: int) -> tuple[Dataset, Dataset]:
    """Pretraining speakers are the first ``n_pretrain_speakers`` ids; the rest are held out."""
    ids = sorted(dataset.speaker_ids)
    return dataset.subset(ids[:n_pretrain_speakers]), dataset.subset(ids[n_pretrain_speakers:])


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(signal_power(clean) / signal_power(noise))


def _babble(frames: int, bins: int, rng: np.random.Generator, n_talkers: int = 4) -> np.ndarray:
    out = np.zeros((frames, bins))
    width = bins // 2
    axis = np.arange(bins)
    for _ in range(n_talkers):
        f = 0
        while f < frames:
            dur = int(rng.integers(2, 9))
            centre = rng.uniform(0, bins)
            bump = rng.uniform(0.5, 1.5) * np.exp(-0.5 * ((axis - centre) / rng.uniform(2, width / 4)) ** 2)
            out[f : f + dur] += bump
            f += dur
    return out - out.mean()


def corrupt(utt: Utterance, spec: NoiseSpec, seed: int) -> Utterance:
    """Add noise at ``spec.snr_db`` over all bins; alignment metadata is untouched.

    The injected noise is kept on the returned utterance (``noise``) so SNR can
    be recomputed against the clean source.
    """
    if not utt.clean:
        raise ValueError(f"utterance {utt.utt_id} is already corrupted")
    rng = np.random.default_rng(seed)
    clean = utt.mel.astype(np.float64)
    if spec.kind == "broadband":
        raw = rng.standard_normal(clean.shape)
    else:
        raw = _babble(clean.shape[0], clean.shape[1], rng)
    scale = math.sqrt(signal_power(clean) / (signal_power(raw) * 10.0 ** (spec.snr_db / 10.0)))
    noise = (raw * scale).astype(np.float32)
    noisy = clean + noise.astype(np.float64)
    if spec.clip_level is not None:
        noisy = np.minimum(noisy, spec.clip_level)
    return replace(utt, mel=noisy.astype(np.float32), clean=False, noise=noise)


def select_prior_pool(
    dataset: Dataset,
    pool_size: int,
    seed: int,
    min_frames: int = 100,
    max_frames: int = 150,
) -> list[Utterance]:
    candidates = [u for u in dataset.utterances if u.clean and min_frames <= u.frames <= max_frames]
    if not candidates:
        raise ValueError(f"empty candidate set: no clean utterance with {min_frames}-{max_frames} frames")
    if len(candidates) < pool_size:
        raise ValueError(f"only {len(candidates)} candidates for a prior pool of {pool_size}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=pool_size, replace=False)
    return [candidates[i] for i in picks]


def select_prompt_bank(
    dataset: Dataset, min_frames: int = 100, max_frames: int = 150
) -> dict[str, Utterance]:
    """One fixed clean prompt per gender tag: the longest in the prior length range, lowest id on ties."""
    bank = {}
    for tag in TAGS:
        candidates = [
            u for u in dataset.utterances
            if u.tag == tag and u.clean and min_frames <= u.frames <= max_frames
        ]
        if not candidates:
            raise ValueError(f"missing gender tag {tag}: no qualifying prompt utterance")
        bank[tag] = min(candidates, key=lambda u: (-u.frames, u.utt_id))
    return bank


# -- on-disk format ---------------------------------------------------------

def _ints(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def _floats(xs) -> str:
    return ",".join(repr(float(x)) for x in np.ravel(xs))


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "speakers.tsv", "w") as fh:
        for s in dataset.speakers:
            fh.write(
                f"{s.speaker_id}\t{s.tag}\t{s.formant_shift}\t{s.pitch_base!r}\t"
                f"{_floats(s.timbre_gain)}\t{s.style.shape[0]}\t{_floats(s.style)}\n"
            )
    with open(directory / "index.tsv", "w") as fh:
        for u in dataset.utterances:
            fh.write(
                f"{u.utt_id}\t{u.speaker_id}\t{u.tag}\t{int(u.clean)}\t{u.frames}\t"
                f"{_ints(u.phonemes)}\t{_ints(u.durations)}\t{_ints(u.prosody)}\n"
            )
            write_mel(u.mel, directory / f"{u.utt_id}.f32")


def write_mel(mel: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(mel, dtype="<f4").tobytes())


def read_mel(path: str | Path, bins: int = 80) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size % bins:
        raise ValueError(f"{path}: {raw.size} floats is not a multiple of {bins} bins")
    return raw.reshape(-1, bins).copy()


def load_dataset(directory: str | Path, bins: int = 80) -> Dataset:
    directory = Path(directory)
    speakers = []
    for line in (directory / "speakers.tsv").read_text().splitlines():
        sid, tag, shift, pitch, gain, n, style = line.split("\t")
        n = int(n)
        speakers.append(
            ToySpeaker(
                int(sid), tag,
                np.array([float(x) for x in gain.split(",")]),
                int(shift), float(pitch),
                np.array([float(x) for x in style.split(",")]).reshape(n, n),
            )
        )
    utterances = []
    for line in (directory / "index.tsv").read_text().splitlines():
        uid, sid, tag, clean, frames, ph, dur, pro = line.split("\t")
        mel = read_mel(directory / f"{uid}.f32", bins)
        if mel.shape[0] != int(frames):
            raise ValueError(f"utterance {uid}: index says {frames} frames, mel has {mel.shape[0]}")
        utterances.append(
            Utterance(
                int(uid), int(sid), tag,
                np.array([int(x) for x in ph.split(",")]),
                np.array([int(x) for x in dur.split(",")]),
                np.array([int(x) for x in pro.split(",")]),
                mel, clean=bool(int(clean)),
            )
        )
    return Dataset(speakers, utterances)
