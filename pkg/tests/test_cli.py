import hashlib

import pytest

from priorvoice.cli import main
from priorvoice.core import RunConfig, load_checkpoint
from priorvoice.corpus import read_mel

from conftest import TINY

CLI_CONFIG = TINY.replace(
    corpus_speakers=4, corpus_pretrain_speakers=2, corpus_utts_per_speaker=8,
    pretrain_steps=3, plm_steps=3, finetune_steps=2, sample_steps=3, target_count=3,
    prior_pool_size=4, prior_min_frames=20, prior_max_frames=400, test_sentences=2,
)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(CLI_CONFIG.to_text())
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(root / "corpus")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--corpus", str(root / "corpus"), "--out", str(root / "base")]) == 0
    return root


def _cfg(workdir):
    return str(workdir / "run.cfg")


def test_pretrain_twice_gives_identical_checkpoint(workdir):
    out = workdir / "base2"
    assert main(["pretrain", "--config", _cfg(workdir), "--corpus", str(workdir / "corpus"), "--out", str(out)]) == 0
    assert _sha(out / "base.ckpt") == _sha(workdir / "base" / "base.ckpt")
    assert (out / "pretrain_trace.tsv").read_text() == (workdir / "base" / "pretrain_trace.tsv").read_text()


def test_corpus_generation_is_byte_identical(workdir, tmp_path):
    assert main(["gen-corpus", "--config", _cfg(workdir), "--out", str(tmp_path / "c")]) == 0
    for f in (workdir / "corpus").iterdir():
        assert f.read_bytes() == (tmp_path / "c" / f.name).read_bytes(), f.name


def test_seed_flag_overrides_config(workdir, tmp_path):
    assert main(["gen-corpus", "--config", _cfg(workdir), "--seed", "9", "--out", str(tmp_path / "c")]) == 0
    assert "seed=9" in (tmp_path / "c" / "config.txt").read_text()
    assert (tmp_path / "c" / "0.f32").read_bytes() != (workdir / "corpus" / "0.f32").read_bytes()


def test_synthesize_without_plm_exits_2_naming_artifact(workdir, tmp_path, capsys):
    code = main([
        "synthesize", "--config", _cfg(workdir), "--corpus", str(workdir / "corpus"),
        "--model", str(workdir / "base" / "base.ckpt"), "--plm", str(tmp_path / "noplm"),
        "--text", "1 2 3", "--speaker", "3", "--prompt-mode", "prior", "--out", str(tmp_path / "s"),
    ])
    assert code == 2
    assert "plm.ckpt" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("codebok_size=128\n")
    assert main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path / "c")]) == 1
    assert "codebok_size" in capsys.readouterr().err


def test_bad_set_value_and_usage_errors_exit_1(tmp_path, capsys):
    assert main(["gen-corpus", "--set", "seed=abc", "--out", str(tmp_path)]) == 1
    assert "seed" in capsys.readouterr().err
    assert main(["gen-corpus"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["gen-corpus", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert "missing.cfg" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(workdir, tmp_path, capsys):
    code = main([
        "train-plm", "--config", _cfg(workdir), "--corpus", str(workdir / "corpus"),
        "--base", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "p"),
    ])
    assert code == 2
    assert "nope.ckpt" in capsys.readouterr().err


def test_full_pipeline_is_deterministic(workdir, tmp_path):
    c, corpus, base = _cfg(workdir), str(workdir / "corpus"), str(workdir / "base" / "base.ckpt")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train-plm", "--config", c, "--corpus", corpus, "--base", base, "--out", str(out / "plm")]) == 0
        assert main([
            "finetune", "--config", c, "--corpus", corpus, "--base", base, "--speaker", "3",
            "--out", str(out / "ft"),
        ]) == 0
        for mode in ("prior", "target"):
            assert main([
                "synthesize", "--config", c, "--corpus", corpus, "--model", str(out / "ft" / "finetuned.ckpt"),
                "--plm", str(out / "plm"), "--text", "1,2,3,4,5", "--speaker", "3",
                "--prompt-mode", mode, "--steps", "3", "--out", str(out / f"syn_{mode}"),
            ]) == 0
        assert main([
            "eval", "--config", c, "--corpus", corpus, "--model", base, "--mel", str(out / "syn_prior" / "mel.f32"),
            "--speaker", "3", "--out", str(out / "eval"),
        ]) == 0
        runs.append(out)
    a, b = runs
    for rel in ("plm/plm.ckpt", "plm/prompt_A.ckpt", "plm/prompt_B.ckpt", "ft/finetuned.ckpt",
                "syn_prior/mel.f32", "syn_target/mel.f32", "syn_prior/durations.txt", "eval/metrics.tsv"):
        assert _sha(a / rel) == _sha(b / rel), rel
    mel = read_mel(a / "syn_prior" / "mel.f32")
    durations = [int(x) for x in (a / "syn_prior" / "durations.txt").read_text().split()]
    assert len(durations) == 5 and mel.shape == (sum(durations), 80)
    ckpt = load_checkpoint(a / "ft" / "finetuned.ckpt")
    assert ckpt.meta["kind"] == "finetune" and ckpt.meta["n_steps"] == 2
    metrics = dict(line.split("\t") for line in (a / "eval" / "metrics.tsv").read_text().splitlines())
    assert set(metrics) == {"noise_floor", "timbre_cos"}


def test_synthesize_rejects_bad_text(workdir, tmp_path):
    code = main([
        "synthesize", "--config", _cfg(workdir), "--corpus", str(workdir / "corpus"),
        "--model", str(workdir / "base" / "base.ckpt"), "--plm", str(tmp_path),
        "--text", "1 x", "--speaker", "3", "--out", str(tmp_path / "s"),
    ])
    assert code == 1


def test_suite_command_writes_tables(workdir, tmp_path):
    c = _cfg(workdir)
    args = ["suite", "--config", c, "--set", "suite_seeds=2", "--experiments", "ablation", "--out", str(tmp_path)]
    assert main(args) == 0
    digest = RunConfig.from_dict({**CLI_CONFIG.to_dict(), "suite_seeds": 2}).digest()
    table = (tmp_path / digest / "ablation.tsv").read_text().splitlines()
    assert table[0].startswith("system\tcondition\tcount\tsteps\tn_seeds")
    assert [row.split("\t")[0] for row in table[1:]] == [
        "stable", "wo_plm", "wo_pp", "wo_prior_prompt", "wo_pp_wo_prior_prompt",
    ]
    assert all(row.split("\t")[4] == "2" for row in table[1:])
