import numpy as np
import pytest
import torch

from priorvoice.corpus import NoiseSpec, corrupt
from priorvoice.pipeline import (
    SynthesisRequest,
    eval_metrics,
    noise_floor,
    pretrain,
    synthesize,
    synthesize_batch,
    timbre_cosine,
    train_plm,
)
from priorvoice.plm import ProsodyLM, build_prompt
from priorvoice import suite
from priorvoice.suite import (
    DATA_SCALE_COUNTS,
    STEP_GRID,
    load_report,
    prepare_artifacts,
    run_experiment_suite,
    table,
)

from conftest import TINY


def test_pretrain_rejects_single_speaker_and_noisy(tiny_corpus):
    one = tiny_corpus.subset([tiny_corpus.speaker_ids[0]])
    with pytest.raises(ValueError, match="two speakers"):
        pretrain(TINY, one, steps=1)
    noisy = tiny_corpus.subset(tiny_corpus.speaker_ids)
    noisy.utterances[0] = corrupt(noisy.utterances[0], NoiseSpec(0.0), seed=0)
    with pytest.raises(ValueError, match="clean"):
        pretrain(TINY, noisy, steps=1)


def test_pretrain_is_deterministic_and_logs_losses(tiny_corpus):
    a, trace = pretrain(TINY, tiny_corpus, steps=3, log_every=0)
    b, _ = pretrain(TINY, tiny_corpus, steps=3, log_every=0)
    assert len(trace) == 3 and set(trace[0]) == {"step", "diff", "commitment", "codebook", "duration"}
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n


@pytest.fixture()
def tiny_plm():
    torch.manual_seed(0)
    return ProsodyLM.from_config(TINY).eval()


def test_synthesis_length_and_determinism(tiny_model, tiny_plm, tiny_corpus):
    utt = tiny_corpus.utterances[0]
    prompt = build_prompt(tiny_model, tiny_corpus.utterances[1])
    refs = tiny_corpus.utterances[2:4]
    a = synthesize(tiny_model, tiny_plm, utt.phonemes, refs, prompt, n_steps=4, seed=1, mode="ode")
    b = synthesize(tiny_model, tiny_plm, utt.phonemes, refs, prompt, n_steps=4, seed=1, mode="ode")
    assert np.array_equal(a.mel, b.mel)
    assert a.mel.shape == (int(a.durations.sum()), 80)
    assert len(a.codes) == len(utt.phonemes) == len(a.durations)
    assert (a.durations >= 1).all()


def test_batched_synthesis_matches_single(tiny_model, tiny_plm, tiny_corpus):
    prompt = build_prompt(tiny_model, tiny_corpus.utterances[1])
    refs = tiny_corpus.utterances[2:5]
    reqs = [SynthesisRequest(u.phonemes, refs, prompt) for u in tiny_corpus.utterances[5:8]]
    batch = synthesize_batch(tiny_model, tiny_plm, reqs, n_steps=3, seed=2)
    assert [len(r.codes) for r in batch] == [len(u.phonemes) for u in tiny_corpus.utterances[5:8]]
    for r in batch:
        assert r.mel.shape[0] == r.durations.sum()


def test_synthesis_errors(tiny_model, tiny_plm, tiny_corpus):
    refs = tiny_corpus.utterances[:1]
    with pytest.raises(ValueError, match="empty"):
        synthesize(tiny_model, tiny_plm, np.array([], dtype=np.int64), refs, None, n_steps=2)
    with pytest.raises(ValueError, match="prompt"):
        synthesize(tiny_model, tiny_plm, np.array([1, 2]), refs, None, n_steps=2)
    out = synthesize(tiny_model, None, np.array([1, 2, 3]), refs, codes=np.array([4, 5]), n_steps=2)
    assert out.codes.tolist() == [4, 5, 4]


def test_noise_floor_examples(tiny_corpus):
    utt = tiny_corpus.utterances[0]
    assert noise_floor(utt.mel) == 0.0
    noisy = corrupt(utt, NoiseSpec(0.0), seed=3)
    assert noise_floor(noisy.mel) > noise_floor(utt.mel)
    mel = np.zeros((4, 80))
    mel[:, 60:] = 2.0
    assert noise_floor(mel) == 4.0


def test_timbre_self_similarity_and_metrics(tiny_model, tiny_corpus):
    utt = tiny_corpus.utterances[0]
    assert timbre_cosine(tiny_model, utt.mel, [utt]) == pytest.approx(1.0, abs=1e-6)
    m = eval_metrics(utt.mel, tiny_model, [utt], [2, 3, 4], [2, 5, 4])
    assert m["noise_floor"] == 0.0 and m["dur_mae"] == pytest.approx(2 / 3)


def test_train_plm_runs_on_frozen_codes(tiny_model, tiny_corpus):
    plm, trace = train_plm(TINY, tiny_model, tiny_corpus, steps=3, log_every=0)
    assert len(trace) == 3 and all(np.isfinite(r["ce"]) for r in trace)
    assert not plm.training


def test_grid_constants():
    assert DATA_SCALE_COUNTS == (1, 5, 20, 100)
    assert 500 in STEP_GRID


SHORT_GRID = (0, 1, 3)

SUITE_CONFIG = TINY.replace(
    corpus_speakers=4, corpus_pretrain_speakers=2, corpus_utts_per_speaker=122,
    pretrain_steps=2, plm_steps=2, finetune_steps=2, sample_steps=2,
    prior_pool_size=4, test_sentences=2, suite_seeds=2,
)


@pytest.fixture(scope="module")
def suite_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    art = prepare_artifacts(SUITE_CONFIG, root / "cache")
    # short sweep keeps the tiny grid fast; the schedule logic is the same
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(suite, "STEP_GRID", SHORT_GRID)
        a = run_experiment_suite(SUITE_CONFIG, root / "a", artifacts=art)
        b = run_experiment_suite(SUITE_CONFIG, root / "b", artifacts=art)
    return a, b


def test_suite_tables_are_reproducible(suite_run):
    a, b = suite_run
    assert a.run_dir.name == SUITE_CONFIG.digest()
    for name in ("ablation.tsv", "zero_shot.tsv", "data_scale.tsv", "steps.tsv", "summary.txt", "records.json"):
        assert (a.run_dir / name).read_bytes() == (b.run_dir / name).read_bytes(), name


def test_suite_grid_shape(suite_run):
    report, _ = suite_run
    counts = sorted({r.count for r in report.select("data_scale")})
    assert counts == [1, 5, 20, 100]
    assert sorted({r.steps for r in report.select("steps")}) == list(SHORT_GRID)
    assert {r.seed for r in report.records} == {0, 1}
    rows = (report.run_dir / "data_scale.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2 * len(DATA_SCALE_COUNTS)
    for record in report.records:
        assert len(record.metrics["noise_floor"]) == SUITE_CONFIG.test_sentences


def test_report_round_trip(suite_run):
    report, _ = suite_run
    back = load_report(report.run_dir)
    assert table(back, "ablation") == table(report, "ablation")
    assert back.to_json() == report.to_json()


def test_step_zero_matches_base_gap(suite_run):
    report, _ = suite_run
    for r in report.select("steps", steps=0):
        assert r.prior_gap == 0.0
