import pytest
import torch
from hypothesis import given, settings, strategies as st

from priorvoice.encoders import (
    DurationPredictor,
    ProsodyEncoder,
    TextEncoder,
    TimbreEncoder,
    VectorQuantizer,
    cycle_references,
    nearest_code,
    phoneme_pool,
    variance_expand,
)


def _prosody_encoder(**kw):
    torch.manual_seed(0)
    return ProsodyEncoder(band=15, hidden=32, code_dim=8, codebook_size=16, d_h=24, **kw).eval()


def test_text_encoder_length_and_determinism():
    torch.manual_seed(0)
    enc = TextEncoder(16, 32).eval()
    ids = torch.tensor([1, 2, 3, 4, 5, 6, 7])
    a = enc(ids)
    assert a.shape == (7, 32)
    assert torch.equal(a, enc(ids))


def test_text_encoder_sensitive_to_single_id():
    torch.manual_seed(0)
    enc = TextEncoder(16, 32).eval()
    a = enc(torch.tensor([1, 2, 3, 4]))
    b = enc(torch.tensor([1, 2, 9, 4]))
    assert not torch.allclose(a, b)


def test_text_encoder_rejects_empty():
    enc = TextEncoder(16, 32)
    with pytest.raises(ValueError):
        enc(torch.zeros((1, 0), dtype=torch.long))


def test_nearest_code_example():
    codebook = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    assert nearest_code(torch.tensor([[0.9, 0.8]]), codebook).tolist() == [1]


def test_nearest_code_tie_goes_to_lowest_index():
    codebook = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    assert nearest_code(torch.tensor([[0.0, 0.0]]), codebook).tolist() == [0]


def test_exact_match_has_zero_residual():
    vq = VectorQuantizer(4, 2).eval()
    vq.codebook.copy_(torch.tensor([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [0.0, 3.0]]))
    idx, q, losses = vq(torch.tensor([[0.0, 0.0]]))
    assert idx.tolist() == [0]
    assert torch.equal(q, torch.zeros(1, 2))
    assert losses["commitment"].item() == 0.0


def test_quantized_values_are_bitwise_codebook_rows():
    torch.manual_seed(1)
    vq = VectorQuantizer(32, 8).eval()
    z = torch.randn(50, 8)
    idx, q, _ = vq(z)
    assert torch.equal(q, vq.codebook[idx])


def test_straight_through_gradient_is_copy():
    torch.manual_seed(2)
    vq = VectorQuantizer(32, 8).eval()
    z = torch.randn(20, 8, requires_grad=True)
    _, q, _ = vq(z)
    w = torch.randn(20, 8)
    (q * w).sum().backward()
    assert torch.equal(z.grad, w)


def test_ema_update_keeps_codebook_finite_and_reseeds_dead_codes():
    torch.manual_seed(3)
    vq = VectorQuantizer(8, 4, dead_code_steps=5).train()
    vq.codebook[1:] += 100.0  # only code 0 is ever nearest at first
    vq.ema_sum.copy_(vq.codebook)
    for _ in range(6):
        vq(torch.randn(64, 4))
    assert torch.isfinite(vq.codebook).all()
    assert (vq.codebook.abs() < 50).all(), "idle codes should have been reseeded from batch features"


def test_lookup_rejects_out_of_range():
    vq = VectorQuantizer(8, 4)
    with pytest.raises(ValueError):
        vq.lookup(torch.tensor([8]))


def _mel_batch(frames=30, seed=0):
    g = torch.Generator().manual_seed(seed)
    mel = torch.randn(1, frames, 80, generator=g)
    durations = torch.tensor([[5, 10, 7, 8]])
    mask = torch.ones(1, frames, dtype=torch.bool)
    return mel, mask, durations


def test_prosody_codes_ignore_bins_above_band():
    enc = _prosody_encoder()
    mel, mask, durations = _mel_batch()
    codes, _, _ = enc(mel, mask, durations)
    bumped = mel.clone()
    bumped[..., 15:] += 10 * torch.randn(bumped[..., 15:].shape)
    codes2, q2, _ = enc(bumped, mask, durations)
    assert torch.equal(codes, codes2)
    assert codes.shape == (1, 4)


def test_prosody_codes_depend_on_band():
    enc = _prosody_encoder()
    mel, mask, durations = _mel_batch()
    z = enc.features(mel, mask, durations)
    bumped = mel.clone()
    bumped[..., :15] += 3.0
    assert not torch.allclose(z, enc.features(bumped, mask, durations))


def test_prosody_rejects_duration_mismatch():
    enc = _prosody_encoder()
    mel, mask, _ = _mel_batch()
    with pytest.raises(ValueError):
        enc(mel, mask, torch.tensor([[5, 10, 7, 9]]))


def test_variance_expand_examples():
    x = torch.tensor([[1.0], [2.0]])
    assert variance_expand(x, torch.tensor([1, 3])).flatten().tolist() == [1.0, 2.0, 2.0, 2.0]
    assert variance_expand(x, torch.tensor([2, 2])).flatten().tolist() == [1.0, 1.0, 2.0, 2.0]
    assert torch.equal(variance_expand(x, torch.tensor([1, 1])), x)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=12), st.integers(0, 10_000))
def test_expand_then_pool_recovers_input(durations, seed):
    d = torch.tensor(durations)
    x = torch.randn(len(durations), 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    frames = variance_expand(x, d)
    assert frames.shape[0] == sum(durations)
    assert torch.allclose(phoneme_pool(frames, d), x, atol=1e-12)


def test_batched_expand_pads_with_zeros():
    x = torch.ones(2, 3, 1)
    d = torch.tensor([[1, 1, 0], [2, 2, 2]])
    out = variance_expand(x, d)
    assert out.shape == (2, 6, 1)
    assert out[0, 2:].abs().sum() == 0


def test_duration_predictor_contract_untrained():
    torch.manual_seed(0)
    pred = DurationPredictor(24)
    hidden = 5 * torch.randn(11, 24)
    d = pred.predict(hidden)
    assert d.shape == (11,)
    assert d.dtype == torch.long and (d >= 1).all()


def test_cycle_references():
    assert cycle_references(["a"], 3) == ["a", "a", "a"]
    assert cycle_references(["a", "b"], 3) == ["a", "b", "a"]
    with pytest.raises(ValueError):
        cycle_references([], 3)


def test_timbre_concatenates_references():
    torch.manual_seed(0)
    enc = TimbreEncoder(80, 32, 16).eval()
    refs = [torch.randn(10, 80), torch.randn(20, 80), torch.randn(30, 80)]
    seen = {}

    def hook(module, args):
        seen["frames"] = args[0].shape[1]

    enc.register_forward_pre_hook(hook)
    s = enc.encode_references([refs], k=3)
    assert seen["frames"] == 60
    assert s.shape == (1, 16)
    joined = torch.cat(refs)[None]
    assert torch.allclose(s, enc(joined, torch.ones(1, 60, dtype=torch.bool)), atol=1e-6)


def test_timbre_single_reference_k1():
    torch.manual_seed(0)
    enc = TimbreEncoder(80, 32, 16).eval()
    s = enc.encode_references([[torch.randn(12, 80)]], k=1)
    assert s.shape == (1, 16) and torch.isfinite(s).all()


def test_timbre_padding_does_not_leak():
    torch.manual_seed(0)
    enc = TimbreEncoder(80, 32, 16).eval()
    a = [torch.randn(10, 80)]
    b = [torch.randn(40, 80)]
    both = enc.encode_references([a, b], k=1)
    alone = enc.encode_references([a], k=1)
    assert torch.allclose(both[0], alone[0], atol=1e-5)
