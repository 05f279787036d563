import numpy as np
import pytest
import torch

from motionmask.core import FPS, InvalidInputError, MotionFrame, MotionSequence, resample
from motionmask.runtime import (
    NumpyAnonymizer,
    NumpyNormalizer,
    Pipeline,
    StreamResampler,
    UsageError,
    anonymize_array,
    anonymize_recording,
    benchmark_latency,
    stream_open,
    stream_sequence,
    stream_step,
    stream_step_array,
)
from motionmask.training import ConfigurationError
from motionmask.bundle import ModelBundle

from conftest import random_frames


def _unit_norm_error(data):
    return max(np.max(np.abs(np.linalg.norm(data[:, c:c + 4], axis=1) - 1)) for c in (3, 10, 17))


def test_numpy_anonymizer_matches_torch(default_bundle):
    z = np.random.default_rng(0).normal(size=(90, 21))
    noise = np.random.default_rng(1).normal(size=32)
    with torch.no_grad():
        want = default_bundle.anonymizer(torch.tensor(z[None], dtype=torch.float64).float(),
                                         torch.tensor(noise[None]).float())[0].numpy()
    got = NumpyAnonymizer(default_bundle.anonymizer).run(z, noise)
    np.testing.assert_allclose(got, want, atol=1e-4)


def test_numpy_normalizer_matches_torch(default_bundle):
    x = np.random.default_rng(2).normal(size=(60, 21))
    with torch.no_grad():
        want = default_bundle.normalizer(torch.tensor(x[None]).float())[0].numpy()
    np.testing.assert_allclose(NumpyNormalizer(default_bundle.normalizer).run(x), want, atol=1e-4)


def test_stream_equals_batch(default_bundle):
    rng = np.random.default_rng(3)
    data = random_frames(rng, 150)
    seq = MotionSequence(np.arange(150) / FPS, data)
    noise = rng.normal(size=32)
    batch = anonymize_array(seq.data, default_bundle, noise)
    streamed = stream_sequence(seq, default_bundle, noise).data
    assert np.max(np.abs(batch - streamed)) <= 1e-9
    assert _unit_norm_error(batch) <= 1e-9


def test_stream_step_frames(default_bundle):
    rng = np.random.default_rng(4)
    seq = MotionSequence(np.arange(20) / FPS, random_frames(rng, 20))
    noise = rng.normal(size=32)
    state = stream_open(default_bundle, seq.frames[0], noise)
    out = [stream_step(state, f) for f in seq.frames]
    assert [f.t for f in out] == list(seq.t)
    got = np.stack([f.to_array() for f in out])
    np.testing.assert_allclose(got, anonymize_array(seq.data, default_bundle, noise), atol=1e-9)
    state.close()
    with pytest.raises(UsageError):
        stream_step(state, seq.frames[0])


def test_batch_causal(default_bundle):
    rng = np.random.default_rng(5)
    data = random_frames(rng, 100)
    noise = rng.normal(size=32)
    y = anonymize_array(data, default_bundle, noise)
    for cut in rng.integers(0, 99, 5):
        d2 = data.copy()
        d2[cut + 1:] = random_frames(rng, 99 - cut)
        np.testing.assert_array_equal(anonymize_array(d2, default_bundle, noise)[:cut + 1], y[:cut + 1])


def test_session_noise_is_held(default_bundle):
    rng = np.random.default_rng(6)
    data = random_frames(rng, 30)
    a = anonymize_array(data, default_bundle, np.zeros(32))
    b = anonymize_array(data, default_bundle, np.ones(32))
    assert not np.allclose(a, b)
    with pytest.raises(InvalidInputError):
        anonymize_array(data, default_bundle, np.full(32, np.nan))
    with pytest.raises(InvalidInputError):
        anonymize_array(data[:, :20], default_bundle, np.zeros(32))


def test_anonymize_recording_resamples(default_bundle):
    rng = np.random.default_rng(7)
    t = np.cumsum(rng.uniform(0.01, 0.02, 60))
    seq = MotionSequence(t - t[0], random_frames(rng, 60), 72.0)
    out = anonymize_recording(seq, default_bundle, rng=1)
    ref = resample(seq)
    np.testing.assert_array_equal(out.t, ref.t)
    assert out.nominal_fps == FPS
    again = anonymize_recording(seq, default_bundle, rng=1)
    np.testing.assert_array_equal(out.data, again.data)


def test_incomplete_bundle_rejected():
    with pytest.raises(ConfigurationError, match="anonymizer"):
        Pipeline.from_bundle(ModelBundle())


def test_pipeline_cache_tracks_components(tiny_bundle):
    p1 = Pipeline.from_bundle(tiny_bundle)
    assert Pipeline.from_bundle(tiny_bundle) is p1
    tiny_bundle.normalizer = type(tiny_bundle.normalizer)(tiny_bundle.arch.normalizer)
    assert Pipeline.from_bundle(tiny_bundle) is not p1


def test_stream_resampler_matches_batch_resample():
    rng = np.random.default_rng(8)
    t = np.cumsum(rng.uniform(0.005, 0.05, 80))
    seq = MotionSequence(t, random_frames(rng, 80))
    rs = StreamResampler()
    out = []
    for ti, row in zip(seq.t, seq.data):
        out += rs.push(ti, row)
    ref = resample(seq)
    got_t = np.array([o[0] for o in out])
    n = min(len(got_t), len(ref))
    assert n >= len(ref) - 1
    np.testing.assert_allclose(got_t[:n], ref.t[:n], atol=1e-9)
    np.testing.assert_allclose(np.stack([o[1] for o in out])[:n], ref.data[:n], atol=1e-9)
    with pytest.raises(InvalidInputError):
        rs.push(t[0], seq.data[0])


def test_stream_rejects_bad_frame(default_bundle):
    state = stream_open(default_bundle, random_frames(np.random.default_rng(9), 1)[0], np.zeros(32))
    with pytest.raises(InvalidInputError):
        stream_step(state, np.zeros(20))


def test_benchmark_latency_fields(tiny_bundle):
    r = benchmark_latency(tiny_bundle, n_frames=50, warmup=5)
    assert r["n_frames"] == 50
    assert 0 < r["p50_ms"] <= r["p99_ms"] <= r["max_ms"]
    assert r["frame_budget_ms"] == pytest.approx(1000 / 30)
