import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from priorvoice.core import RunConfig, load_checkpoint, save_checkpoint
from priorvoice.core.checkpoint import checkpoint_bytes
from priorvoice.plm import (
    PlmExample,
    PromptEntry,
    ProsodyLM,
    build_prompt,
    build_sequence,
    plm_decode,
    plm_loss,
    plm_train_step,
)

D_H, K = 16, 128


def _plm(seed=0, layers=2):
    torch.manual_seed(seed)
    return ProsodyLM(D_H, K, dim=32, layers=layers, heads=2, max_len=64)


def _example(g, lp=6, lt=9):
    return PlmExample(
        torch.randn(lp, D_H, generator=g),
        torch.randint(K, (lp,), generator=g),
        torch.randn(lt, D_H, generator=g),
        torch.randint(K, (lt,), generator=g),
    )


def test_untrained_loss_is_uniform_entropy():
    g = torch.Generator().manual_seed(0)
    batch = [_example(g, 8, 20) for _ in range(64)]
    loss = plm_loss(_plm(), batch).item()
    assert abs(loss - math.log(K)) < 0.3


def test_memorises_single_example():
    plm = _plm(layers=2)
    g = torch.Generator().manual_seed(1)
    ex = _example(g)
    opt = torch.optim.Adam(plm.parameters(), lr=1e-3)
    for _ in range(500):
        loss = plm_train_step(plm, [ex], opt)
    assert loss < 0.1


def test_out_of_range_code_rejected():
    g = torch.Generator().manual_seed(2)
    ex = _example(g)
    ex.target_codes[0] = K
    with pytest.raises(ValueError):
        plm_loss(_plm(), [ex])


def test_loss_counts_target_positions_only():
    g = torch.Generator().manual_seed(3)
    ex = _example(g, lp=6, lt=9)
    plm = _plm()
    text, code_in, seg = build_sequence(ex.prompt_mu, ex.prompt_codes, ex.target_mu, ex.target_codes, plm.start)
    logits = plm(text[None], code_in[None], seg[None])[0]
    expected = F.cross_entropy(logits[6:], ex.target_codes)
    assert plm_loss(plm, [ex]).item() == pytest.approx(expected.item(), rel=1e-6)
    assert code_in[0] == plm.start and (code_in[1:] == torch.cat([ex.prompt_codes, ex.target_codes])[:-1]).all()


def test_padding_does_not_change_loss():
    g = torch.Generator().manual_seed(8)
    short, long = _example(g, 4, 5), _example(g, 8, 20)
    plm = _plm()
    a = plm_loss(plm, [short]) * 5 + plm_loss(plm, [long]) * 20
    assert plm_loss(plm, [short, long]).item() == pytest.approx(a.item() / 25, rel=1e-5)


class _FixedLogits(nn.Module):
    """Toy PLM whose output at target position ``i`` is a fixed logit row."""

    def __init__(self, rows):
        super().__init__()
        self.rows = torch.tensor(rows)
        self.codebook_size = self.rows.shape[1]
        self.start = self.codebook_size

    def forward(self, text, code_in, segment):
        n_target = int((segment == 1).sum())
        out = torch.zeros(text.shape[0], text.shape[1], self.codebook_size)
        out[:, -1] = self.rows[n_target - 1]
        return out


def test_greedy_hand_set_logits():
    rows = [[0.1, 2.0, 0.3, 0.0], [1.5, 1.5, 0.2, 0.0]]
    prompt = PromptEntry(torch.zeros(2, D_H), torch.tensor([0, 3]))
    codes = plm_decode(_FixedLogits(rows), prompt, torch.zeros(2, D_H))
    assert codes.tolist() == [1, 0]


def test_decode_length_determinism_and_range():
    plm = _plm().eval()
    g = torch.Generator().manual_seed(4)
    prompt = PromptEntry(torch.randn(7, D_H, generator=g), torch.randint(K, (7,), generator=g))
    mu = torch.randn(9, D_H, generator=g)
    a = plm_decode(plm, prompt, mu)
    assert len(a) == 9
    assert np.array_equal(a, plm_decode(plm, prompt, mu))
    assert a.min() >= 0 and a.max() < K
    t1 = plm_decode(plm, prompt, mu, mode="topk", seed=5)
    assert np.array_equal(t1, plm_decode(plm, prompt, mu, mode="topk", seed=5))
    assert t1.max() < K


def test_decode_rejects_empty_and_bad_mode():
    plm = _plm()
    prompt = PromptEntry(torch.zeros(2, D_H), torch.tensor([0, 1]))
    with pytest.raises(ValueError):
        plm_decode(plm, prompt, torch.zeros(0, D_H))
    with pytest.raises(ValueError):
        plm_decode(plm, prompt, torch.zeros(3, D_H), mode="beam")


def test_causality_under_text_perturbation():
    plm = _plm(seed=6).eval()
    g = torch.Generator().manual_seed(6)
    prompt = PromptEntry(torch.randn(5, D_H, generator=g), torch.randint(K, (5,), generator=g))
    mu = torch.randn(12, D_H, generator=g)
    ref = plm_decode(plm, prompt, mu)
    for j in (0, 4, 11):
        bumped = mu.clone()
        bumped[j:] += 5 * torch.randn(bumped[j:].shape, generator=g)
        out = plm_decode(plm, prompt, bumped)
        assert np.array_equal(out[:j], ref[:j])

    # and at the logit level, in one teacher-forced pass
    text = torch.randn(1, 10, D_H, generator=g)
    code_in = torch.randint(K, (1, 10), generator=g)
    seg = torch.zeros(1, 10, dtype=torch.long)
    a = plm(text, code_in, seg)
    text2 = text.clone()
    text2[0, 6] += 3.0
    b = plm(text2, code_in, seg)
    assert torch.allclose(a[0, :6], b[0, :6], atol=1e-6)
    assert not torch.allclose(a[0, 6], b[0, 6])


def test_sequence_longer_than_max_len_rejected():
    plm = _plm()
    with pytest.raises(ValueError):
        plm(torch.zeros(1, 65, D_H), torch.zeros(1, 65, dtype=torch.long), torch.zeros(1, 65, dtype=torch.long))


def test_prompt_entry_round_trip(tmp_path):
    g = torch.Generator().manual_seed(7)
    entry = PromptEntry(torch.randn(31, D_H, generator=g), torch.randint(K, (31,), generator=g), 12, "A")
    save_checkpoint(entry.to_checkpoint(None), tmp_path / "p.ckpt")
    back = PromptEntry.from_checkpoint(load_checkpoint(tmp_path / "p.ckpt"))
    assert torch.equal(back.mu, entry.mu) and torch.equal(back.codes, entry.codes)
    assert (back.utt_id, back.tag) == (12, "A")
    assert len(back.codes) == 31


def test_build_prompt_bytes_are_stable_and_require_clean(tiny_model, tiny_corpus):
    utt = tiny_corpus.utterances[0]
    a = checkpoint_bytes(build_prompt(tiny_model, utt).to_checkpoint(None))
    b = checkpoint_bytes(build_prompt(tiny_model, utt).to_checkpoint(None))
    assert a == b
    entry = build_prompt(tiny_model, utt)
    assert len(entry.codes) == len(utt.phonemes)
    assert entry.codes.min() >= 0 and entry.codes.max() < tiny_model.config.codebook_size
    from priorvoice.corpus import NoiseSpec, corrupt

    with pytest.raises(ValueError):
        build_prompt(tiny_model, corrupt(utt, NoiseSpec(0.0), seed=1))


def test_plm_checkpoint_round_trip(tmp_path):
    cfg = RunConfig(plm_dim=32, plm_layers=1, plm_heads=2)
    torch.manual_seed(0)
    plm = ProsodyLM.from_config(cfg)
    save_checkpoint(plm.to_checkpoint(cfg), tmp_path / "plm.ckpt")
    back = ProsodyLM.from_checkpoint(load_checkpoint(tmp_path / "plm.ckpt"))
    for (n, p), (_, q) in zip(plm.state_dict().items(), back.state_dict().items()):
        assert torch.equal(p, q), n
