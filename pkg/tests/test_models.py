import numpy as np
import pytest
import torch

from motionmask.core import InvalidInputError
from motionmask.models import (
    Anonymizer,
    AnonymizerConfig,
    ArchitectureConfig,
    EncoderConfig,
    FunnelEncoder,
    Identifier,
    Normalizer,
    NormalizerConfig,
    SimilarityModel,
    anonymize,
    classify,
    count_parameters,
    encode,
    normalize,
    parameter_report,
    similarity,
    similarity_from_embeddings,
)

from conftest import tiny_arch


def _lstm_params(n_in, n_hidden):
    # weight_ih, weight_hh and the two bias vectors, four gates each
    return 4 * n_hidden * (n_in + n_hidden) + 8 * n_hidden


def test_parameter_counts_match_layer_arithmetic():
    rep = parameter_report(ArchitectureConfig())
    encoder = _lstm_params(21, 256) + _lstm_params(256, 256)
    assert rep["action_similarity"] == rep["user_similarity"] == encoder + 2
    conv = 21 * 64 * 31 + 64
    dense = (117 * 128 + 128) + (128 * 64 + 64) + (64 * 21 + 21)
    assert rep["anonymizer"] == conv + dense == 66453
    assert rep["normalizer"] == _lstm_params(21, 256) + 256 * 21 + 21
    assert rep["total"] == 2 * (encoder + 2) + rep["anonymizer"] + rep["normalizer"]


def test_identifier_shapes():
    cfg = tiny_arch().encoder
    net = Identifier(5, cfg)
    x = torch.randn(3, 90, 21)
    assert net(x).shape == (3, 5)
    assert net.encoder(x).shape == (3, cfg.embedding_dim)
    p = classify(x[0].numpy(), net)
    assert p.shape == (5,) and p.sum() == pytest.approx(1.0)
    sub = Identifier(4, cfg, n_inputs=8)
    assert sub(torch.randn(2, 60, 8)).shape == (2, 4)


def test_encoder_rejects_partial_chunks():
    enc = FunnelEncoder(tiny_arch().encoder)
    with pytest.raises(InvalidInputError):
        encode(np.zeros((45, 21)), enc)
    with pytest.raises(InvalidInputError):
        EncoderConfig(chunk_len=7)


def test_funnel_pools_one_second_chunks():
    torch.manual_seed(0)
    enc = FunnelEncoder(tiny_arch().encoder)
    x = torch.randn(2, 90, 21)
    h, _ = enc.frame_lstm(x)
    want = h.reshape(2, 3, 30, -1).mean(2)
    torch.testing.assert_close(enc.pooled(x), want)


def test_similarity_head_formula_and_symmetry():
    torch.manual_seed(1)
    m = SimilarityModel(tiny_arch().encoder)
    with torch.no_grad():
        m.log_scale.fill_(0.3)
        m.bias.fill_(1.5)
    a, b = torch.randn(4, 60, 21), torch.randn(4, 60, 21)
    with torch.no_grad():
        ea, eb = m.encoder(a), m.encoder(b)
        want = torch.sigmoid(1.5 - np.exp(0.3) * (ea - eb).norm(dim=-1))
        torch.testing.assert_close(torch.sigmoid(m(a, b)), want, atol=1e-6, rtol=1e-5)
        torch.testing.assert_close(m(a, b), m(b, a), atol=1e-6, rtol=1e-5)
    s = similarity(a.numpy(), b.numpy(), m)
    np.testing.assert_allclose(similarity_from_embeddings(ea.numpy(), eb.numpy(), m), s, atol=1e-6)
    assert similarity(a[0].numpy(), a[0].numpy(), m) == pytest.approx(1 / (1 + np.exp(-1.5)), abs=1e-4)


def test_anonymizer_causal():
    torch.manual_seed(2)
    m = Anonymizer(AnonymizerConfig())
    x, noise = torch.randn(1, 120, 21), torch.randn(1, 32)
    y = m(x, noise)
    for cut in (0, 1, 30, 77, 119):
        x2 = x.clone()
        x2[:, cut + 1:] = torch.randn_like(x2[:, cut + 1:])
        y2 = m(x2, noise)
        assert torch.equal(y[:, :cut + 1], y2[:, :cut + 1])


def test_anonymizer_warmup_replicates_first_frame():
    torch.manual_seed(3)
    m = Anonymizer(AnonymizerConfig())
    x, noise = torch.randn(1, 50, 21), torch.randn(1, 32)
    padded = torch.cat([x[:, :1].expand(-1, 30, -1), x], dim=1)
    # with an explicit warm-up prefix the first real frame sees the same 31-frame window
    torch.testing.assert_close(m(x, noise)[:, 0], m(padded, noise)[:, 30])


def test_anonymizer_noise_changes_output():
    torch.manual_seed(4)
    m = Anonymizer(AnonymizerConfig())
    x = np.random.default_rng(0).normal(size=(60, 21)).astype(np.float32)
    a = anonymize(x, np.zeros(32), m)
    b = anonymize(x, np.ones(32), m)
    assert a.shape == (60, 21)
    assert not np.allclose(a, b)
    with pytest.raises(InvalidInputError):
        anonymize(x, np.zeros(31), m)


def test_normalizer_causal_and_shape():
    torch.manual_seed(5)
    m = Normalizer(NormalizerConfig(state_dim=16))
    x = np.random.default_rng(1).normal(size=(80, 21)).astype(np.float32)
    y = normalize(x, m)
    x2 = x.copy()
    x2[40:] += 3.0
    y2 = normalize(x2, m)
    assert y.shape == (80, 21)
    np.testing.assert_array_equal(y[:40], y2[:40])
    assert count_parameters(m) == _lstm_params(21, 16) + 16 * 21 + 21


def test_architecture_config_roundtrip():
    arch = tiny_arch(12)
    assert ArchitectureConfig.from_dict(arch.to_dict()) == arch
