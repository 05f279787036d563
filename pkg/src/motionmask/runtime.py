"""Deployment: post-hoc anonymization of recordings and frame-by-frame streaming.

Both paths run the same float64 numpy re-implementation of the anonymizer and
normalizer, so their outputs agree to rounding error. The pipeline per frame:
z-score, anonymizer (causal conv over the last 31 frames + noise + frame),
population shift, normalizer LSTM step, de-normalize, quaternion renorm.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from torch import nn

from .bundle import ModelBundle
from .core import (
    FPS,
    N_DIMS,
    InvalidInputError,
    MotionFrame,
    MotionSequence,
    interpolate_frames,
    renormalize_quaternions,
    resample,
)
from .models import Anonymizer, Normalizer
from .training import PopulationShift


class UsageError(RuntimeError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class NumpyAnonymizer:
    def __init__(self, model: Anonymizer):
        sd = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in model.state_dict().items()}
        self.kernel = model.cfg.kernel
        self.noise_dim = model.cfg.noise_dim
        # conv weight (filters, channels, taps) -> (taps, channels, filters)
        self.conv_w = np.ascontiguousarray(sd["conv.weight"].transpose(2, 1, 0))
        self.conv_b = sd["conv.bias"]
        idx = [i for i, m in enumerate(model.dense) if isinstance(m, nn.Linear)]
        # every linear layer except the last is followed by tanh
        self.dense = [(sd[f"dense.{i}.weight"].T.copy(), sd[f"dense.{i}.bias"], i != idx[-1]) for i in idx]

    def _mlp(self, h):
        for w, b, act in self.dense:
            h = h @ w + b
            if act:
                h = np.tanh(h)
        return h

    def run(self, z: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Whole sequence ``(N, 21)`` with first-frame warm-up padding."""
        pad = np.repeat(z[:1], self.kernel - 1, axis=0)
        zp = np.concatenate([pad, z])
        taps = np.lib.stride_tricks.sliding_window_view(zp, self.kernel, axis=0)  # (N, 21, taps)
        conv = np.einsum("nct,tcf->nf", taps, self.conv_w) + self.conv_b
        hyb = np.concatenate([z, np.broadcast_to(noise, (len(z), self.noise_dim)), conv], axis=1)
        return self._mlp(hyb)

    def step(self, buffer: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """One frame from a ``(31, 21)`` buffer whose last row is the current frame."""
        conv = np.einsum("tc,tcf->f", buffer, self.conv_w) + self.conv_b
        return self._mlp(np.concatenate([buffer[-1], noise, conv]))


class NumpyNormalizer:
    def __init__(self, model: Normalizer):
        sd = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in model.state_dict().items()}
        self.w_ih = sd["lstm.weight_ih_l0"].T.copy()
        self.w_hh = sd["lstm.weight_hh_l0"].T.copy()
        self.b = sd["lstm.bias_ih_l0"] + sd["lstm.bias_hh_l0"]
        self.w_out = sd["out.weight"].T.copy()
        self.b_out = sd["out.bias"]
        self.hidden = self.w_hh.shape[0]

    def initial_state(self):
        return np.zeros(self.hidden), np.zeros(self.hidden)

    def _cell(self, gx, h, c):
        g = gx + h @ self.w_hh
        n = self.hidden
        i, f = _sigmoid(g[:n]), _sigmoid(g[n:2 * n])
        cand, o = np.tanh(g[2 * n:3 * n]), _sigmoid(g[3 * n:])
        c = f * c + i * cand
        h = o * np.tanh(c)
        return h, c

    def run(self, x: np.ndarray) -> np.ndarray:
        gx = x @ self.w_ih + self.b
        h, c = self.initial_state()
        hs = np.empty((len(x), self.hidden))
        for t in range(len(x)):
            h, c = self._cell(gx[t], h, c)
            hs[t] = h
        return hs @ self.w_out + self.b_out

    def step(self, x: np.ndarray, state):
        h, c = self._cell(x @ self.w_ih + self.b, *state)
        return h @ self.w_out + self.b_out, (h, c)


@dataclass
class Pipeline:
    """Float64 inference view of a runtime bundle."""

    mean: np.ndarray
    std: np.ndarray
    shift: PopulationShift
    anonymizer: NumpyAnonymizer
    normalizer: NumpyNormalizer

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "Pipeline":
        bundle.require_runtime()
        key = tuple(id(x) for x in (bundle.input_stats, bundle.shift, bundle.anonymizer, bundle.normalizer))
        cached = getattr(bundle, "_pipeline", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        pipe = cls(bundle.input_stats.mean, bundle.input_stats.std,
                   bundle.shift or PopulationShift.identity(),
                   NumpyAnonymizer(bundle.anonymizer), NumpyNormalizer(bundle.normalizer))
        bundle._pipeline = (key, pipe)
        return pipe

    def anonymized_z(self, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Anonymizer output in z-space (before shift and normalizer)."""
        return self.anonymizer.run((x - self.mean) / self.std, noise)

    def run(self, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
        a = self.anonymized_z(x, noise)
        n = self.normalizer.run(self.shift.apply(a))
        return renormalize_quaternions(n * self.std + self.mean)


def fresh_noise(rng=None, dim: int = 32) -> np.ndarray:
    rng = np.random.default_rng(rng)
    return rng.standard_normal(dim)


def _check_noise(noise, dim: int) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (dim,) or not np.all(np.isfinite(noise)):
        raise InvalidInputError(f"noise must be a finite vector of length {dim}")
    return noise


def anonymize_array(data: np.ndarray, bundle: ModelBundle, noise) -> np.ndarray:
    """Anonymize a uniform 30 fps ``(N, 21)`` array with a fixed session noise."""
    pipe = Pipeline.from_bundle(bundle)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != N_DIMS or len(data) == 0:
        raise InvalidInputError(f"expected (frames, {N_DIMS}) data, got {data.shape}")
    return pipe.run(data, _check_noise(noise, pipe.anonymizer.noise_dim))


def anonymize_recording(seq: MotionSequence, bundle: ModelBundle, noise=None, rng=None) -> MotionSequence:
    """Post-hoc anonymization. Output keeps the 30 fps time base of the resampled input."""
    bundle.require_runtime()
    if noise is None:
        noise = fresh_noise(rng, bundle.arch.anonymizer.noise_dim)
    seq30 = resample(seq, FPS) if len(seq) > 1 else seq
    return MotionSequence(seq30.t, anonymize_array(seq30.data, bundle, noise), FPS)


def apply_population_shift(x, shift: PopulationShift) -> np.ndarray:
    return shift.apply(x)


@dataclass
class StreamState:
    pipeline: Pipeline
    noise: np.ndarray
    buffer: np.ndarray
    norm_state: tuple = field(default=None)
    frames: int = 0
    closed: bool = False

    def close(self) -> None:
        self.closed = True


def stream_open(bundle: ModelBundle, first_frame, noise=None, rng=None) -> StreamState:
    """Start a session; the conv buffer holds 31 copies of the first frame."""
    pipe = Pipeline.from_bundle(bundle)
    if noise is None:
        noise = fresh_noise(rng, pipe.anonymizer.noise_dim)
    noise = _check_noise(noise, pipe.anonymizer.noise_dim)
    row = _frame_row(first_frame)
    z = (row - pipe.mean) / pipe.std
    buf = np.repeat(z[None], pipe.anonymizer.kernel, axis=0)
    return StreamState(pipe, noise.copy(), buf, pipe.normalizer.initial_state())


def _frame_row(frame) -> np.ndarray:
    if isinstance(frame, MotionFrame):
        return frame.to_array()
    row = np.asarray(frame, dtype=np.float64)
    if row.shape != (N_DIMS,) or not np.all(np.isfinite(row)):
        raise InvalidInputError(f"frame must be a MotionFrame or finite {N_DIMS}-vector")
    return row


def stream_step_array(state: StreamState, row: np.ndarray) -> np.ndarray:
    """Array form of :func:`stream_step`: one 21-vector in, one out."""
    if state.closed:
        raise UsageError("stream is closed")
    pipe = state.pipeline
    buf = state.buffer
    buf[:-1] = buf[1:]
    buf[-1] = (row - pipe.mean) / pipe.std
    a = pipe.anonymizer.step(buf, state.noise)
    y, state.norm_state = pipe.normalizer.step(pipe.shift.apply(a), state.norm_state)
    state.frames += 1
    return renormalize_quaternions(y * pipe.std + pipe.mean)


def stream_step(state: StreamState, frame: MotionFrame) -> MotionFrame:
    """Anonymize one frame. Call it for every frame, the first one included."""
    out = stream_step_array(state, _frame_row(frame))
    t = frame.t if isinstance(frame, MotionFrame) else state.frames / FPS
    return MotionFrame.from_array(out, t)


def stream_sequence(seq: MotionSequence, bundle: ModelBundle, noise) -> MotionSequence:
    """Feed a 30 fps sequence through the streaming path frame by frame."""
    state = stream_open(bundle, seq.data[0], noise)
    out = np.stack([stream_step_array(state, row) for row in seq.data])
    return MotionSequence(seq.t, out, FPS)


class StreamResampler:
    """Turns frames at arbitrary timestamps into a 30 fps stream with one-frame delay."""

    def __init__(self, fps: float = FPS):
        self.period = 1.0 / fps
        self.prev: tuple[float, np.ndarray] | None = None
        self.next_t: float | None = None

    def push(self, t: float, row) -> list[tuple[float, np.ndarray]]:
        row = np.asarray(row, dtype=np.float64)
        out = []
        if self.prev is None:
            self.prev, self.next_t = (t, row), t
            return out
        t0, r0 = self.prev
        if t <= t0:
            raise InvalidInputError("timestamps must be strictly increasing")
        while self.next_t <= t + 1e-12:
            u = min(max((self.next_t - t0) / (t - t0), 0.0), 1.0)
            out.append((self.next_t, interpolate_frames(r0, row, u)))
            self.next_t += self.period
        self.prev = (t, row)
        return out


def benchmark_latency(bundle: ModelBundle, n_frames: int = 2000, warmup: int = 100, seed: int = 0) -> dict:
    """Per-frame wall-clock of :func:`stream_step_array` on a synthetic stream, in milliseconds."""
    from .synth import synth_generate

    corpus = synth_generate(1, 1, 1, seed=seed, duration=(n_frames + warmup) / FPS + 1)
    data = next(iter(corpus.sequences.values())).data
    state = stream_open(bundle, data[0], rng=seed)
    for row in data[:warmup]:
        stream_step_array(state, row)
    times = np.empty(n_frames)
    for i, row in enumerate(data[warmup:warmup + n_frames]):
        t0 = time.perf_counter()
        stream_step_array(state, row)
        times[i] = time.perf_counter() - t0
    ms = times * 1e3
    return {
        "n_frames": int(n_frames),
        "mean_ms": float(ms.mean()),
        "p50_ms": float(np.percentile(ms, 50)),
        "p99_ms": float(np.percentile(ms, 99)),
        "max_ms": float(ms.max()),
        "frame_budget_ms": 1000.0 / FPS,
    }
