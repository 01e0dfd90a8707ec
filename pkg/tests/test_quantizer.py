import math

import numpy as np
import pytest
import torch

from app.services.quantizer import Codebook


def _codebook(codewords):
    codewords = torch.as_tensor(codewords, dtype=torch.float32)
    codebook = Codebook(codewords.shape[0], codewords.shape[1])
    codebook.embeddings.copy_(codewords)
    return codebook


def _as_z_e(rows):
    """[N, d] rows as a [1, d, N] encoder output"""
    return torch.as_tensor(rows, dtype=torch.float32).t().unsqueeze(0)


def test_exact_codeword_has_zero_distance():
    """Test that z_e equal to codeword 3 maps to index 3 at distance 0"""
    codebook = _codebook(torch.randn(6, 4))
    result = codebook.quantize(_as_z_e(codebook.embeddings[3:4]))
    assert result.indices.item() == 3
    assert result.distances[0, 0, 3].item() == 0.0


def test_equidistant_codewords_pick_lowest_index():
    """Test the lowest-index tie-break"""
    codebook = _codebook([[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0]])
    result = codebook.quantize(_as_z_e([[0.0, 0.0]]))
    assert result.indices.item() == 1


def test_indices_match_exhaustive_scan():
    """Test nearest lookup against a brute-force scan with K=8"""
    generator = torch.Generator().manual_seed(0)
    codebook = _codebook(torch.randn(8, 5, generator=generator))
    z_e = torch.randn(3, 5, 40, generator=generator, dtype=torch.float64)
    result = codebook.quantize(z_e)
    flat = z_e.permute(0, 2, 1).reshape(-1, 5).numpy()
    codewords = codebook.embeddings.double().numpy()
    expected = np.argmin(((flat[:, None, :] - codewords[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(result.indices.reshape(-1).numpy(), expected)


def test_quantized_values_are_codewords_and_gradient_passes_through():
    """Test z_q equals the selected codewords and the straight-through gradient"""
    codebook = _codebook(torch.randn(4, 3))
    z_e = torch.randn(2, 3, 5, requires_grad=True)
    result = codebook.quantize(z_e)
    expected = codebook.embeddings[result.indices].permute(0, 2, 1)
    assert torch.allclose(result.z_q, expected, atol=1e-6)
    upstream = torch.randn_like(result.z_q)
    result.z_q.backward(upstream)
    assert torch.equal(z_e.grad, upstream)


def test_perplexity_bounds():
    """Test that batch perplexity lies in [1, K]"""
    codebook = _codebook(torch.randn(16, 4))
    result = codebook.quantize(torch.randn(4, 4, 50))
    assert 1.0 <= result.perplexity <= 16.0
    single = codebook.quantize(_as_z_e(codebook.embeddings[[2, 2, 2]]))
    assert single.perplexity == pytest.approx(1.0)


def test_decay_one_leaves_codebook_unchanged():
    """Test that decay 1 is a no-op"""
    codebook = _codebook(torch.randn(4, 3))
    before = codebook.embeddings.clone()
    codebook.ema_update(torch.randn(10, 3), torch.zeros(10, dtype=torch.long), decay=1.0)
    assert torch.equal(codebook.embeddings, before)


def test_ema_converges_to_cluster_point():
    """Test 200 updates at decay 0.99 on a constant cluster"""
    codebook = _codebook(torch.randn(8, 3) * 5)
    point = torch.tensor([0.3, -1.2, 2.5])
    batch = point.repeat(16, 1)
    for _ in range(200):
        codebook.ema_update(batch, torch.zeros(16, dtype=torch.long), decay=0.99)
    assert torch.linalg.vector_norm(codebook.embeddings[0] - point).item() < 1e-3


def test_empty_cluster_is_unchanged():
    """Test that codes without assignments keep their codeword"""
    codebook = _codebook(torch.randn(4, 3))
    before = codebook.embeddings.clone()
    codebook.ema_update(torch.randn(5, 3), torch.zeros(5, dtype=torch.long), decay=0.9)
    assert torch.equal(codebook.embeddings[1:], before[1:])
    assert not torch.equal(codebook.embeddings[0], before[0])


def test_restart_noop_when_all_codes_used():
    """Test that balanced usage triggers no restart"""
    codebook = _codebook(torch.randn(4, 2))
    before = codebook.embeddings.clone()
    codebook.record_usage(torch.tensor([10.0, 9.0, 11.0, 10.0]))
    assert codebook.restart_dead_codes(torch.randn(8, 2), threshold=0.1) == 0
    assert torch.equal(codebook.embeddings, before)


def test_restart_reinitialises_unused_code_from_donor():
    """Test that a zero-usage code is re-seeded with a donor vector"""
    codebook = _codebook(torch.randn(4, 2))
    codebook.record_usage(torch.tensor([10.0, 0.0, 11.0, 10.0]))
    donors = torch.randn(6, 2)
    assert codebook.restart_dead_codes(donors, threshold=0.1) == 1
    assert any(torch.equal(codebook.embeddings[1], donor) for donor in donors)
    assert codebook.usage.sum().item() == 0.0


def test_restart_threshold_zero_never_restarts():
    """Test that threshold 0 disables restarts"""
    codebook = _codebook(torch.randn(4, 2))
    before = codebook.embeddings.clone()
    codebook.record_usage(torch.tensor([10.0, 0.0, 0.0, 0.0]))
    assert codebook.restart_dead_codes(torch.randn(3, 2), threshold=0.0) == 0
    assert torch.equal(codebook.embeddings, before)


def test_pseudo_probabilities_uniform_when_equidistant():
    """Test four codewords equidistant from the query"""
    codebook = _codebook([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    probs = codebook.pseudo_probabilities(torch.zeros(1, 2))
    assert np.allclose(probs.numpy(), 0.25, atol=1e-12)


def test_pseudo_probabilities_softmax_of_negative_distance():
    """Test distances 0 and ln 3 giving (0.75, 0.25)"""
    codebook = _codebook([[0.0], [math.log(3.0)]])
    probs = codebook.pseudo_probabilities(torch.zeros(1, 1)).numpy()[0]
    assert probs[0] == pytest.approx(0.75, abs=1e-7)
    assert probs[1] == pytest.approx(0.25, abs=1e-7)


def test_pseudo_probability_argmax_matches_index():
    """Test monotonicity between distances and pseudo-probabilities"""
    codebook = _codebook(torch.randn(10, 4))
    z_e = torch.randn(2, 4, 30)
    probs = codebook.pseudo_probabilities(z_e)
    assert np.allclose(probs.sum(dim=1).numpy(), 1.0, atol=1e-9)
    assert torch.equal(probs.argmax(dim=1), codebook.quantize(z_e).indices.reshape(-1))
