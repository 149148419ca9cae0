import os
from pathlib import Path

import pytest
import torch

from priorvoice.core import RunConfig
from priorvoice.corpus import generate_corpus
from priorvoice.model import VoiceModel

TINY = RunConfig(
    codebook_size=32, code_dim=8, d_h=32, d_s=16, prosody_hidden=32, timbre_hidden=32,
    est_hidden=32, est_layers=2, plm_dim=32, plm_layers=1, plm_heads=2,
    segment_frames=32, batch_size=4, finetune_batch_size=2,
)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY, 4, 12, seed=5)


@pytest.fixture()
def tiny_model(tiny_corpus):
    torch.manual_seed(0)
    model = VoiceModel(TINY)
    model.fit_normalization([u.mel for u in tiny_corpus.utterances])
    return model.eval()


# Full-size artifacts (pretrained model, PLM, suite records) are cached on disk
# under a directory named by the config digest so repeated runs reuse them.
ARTIFACT_ROOT = Path(os.environ.get("PRIORVOICE_ARTIFACTS", Path(__file__).resolve().parent.parent / ".artifacts"))


@pytest.fixture(scope="session")
def full_config():
    return RunConfig()


@pytest.fixture(scope="session")
def trained(full_config):
    from priorvoice.suite import prepare_artifacts

    return prepare_artifacts(full_config, ARTIFACT_ROOT / full_config.digest())


ACCEPTANCE_EXPERIMENTS = ("ablation", "zero_shot", "data_scale")


@pytest.fixture(scope="session")
def report(trained, full_config):
    from priorvoice.suite import load_report, run_experiment_suite

    run_dir = ARTIFACT_ROOT / full_config.digest()
    if (run_dir / "records.json").exists():
        cached = load_report(run_dir)
        if {r.experiment for r in cached.records} >= set(ACCEPTANCE_EXPERIMENTS):
            return cached
    return run_experiment_suite(full_config, ARTIFACT_ROOT, ACCEPTANCE_EXPERIMENTS, artifacts=trained)
