"""Synthetic three-device telemetry for desk-scale experiments.

Each user carries five persistent traits (height offset, arm span, tempo,
smoothness, wrist-rotation bias). Each activity is a bank of periodic target
waveforms shared by everyone who performs it. A recording is the activity
waveform warped and shaped by the user's traits plus per-frame jitter.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .core import FPS, InvalidInputError, MotionSequence, quat_from_rotvec
from .dataset import Key, Manifest, ManifestEntry, RecordingMeta, write_recording

_EPOCH = datetime(2023, 1, 1, tzinfo=timezone.utc)
_N_WAVES = 3
# position / rotation-vector amplitude per device (head, left, right)
_POS_AMP = np.array([0.03, 0.14, 0.14])
_ROT_AMP = np.array([0.12, 0.45, 0.45])


@dataclass(frozen=True)
class UserTraits:
    height: float
    arm_span: float
    tempo: float
    smoothness: float
    rotation_bias: float


@dataclass(frozen=True)
class ActivityBank:
    freq: np.ndarray   # (3 devices, 6 channels, waves)
    amp: np.ndarray
    phase: np.ndarray


@dataclass
class SynthCorpus:
    manifest: Manifest
    sequences: dict[Key, MotionSequence]
    users: dict[str, UserTraits]
    activities: dict[str, ActivityBank]

    def write(self, directory) -> Manifest:
        """Write every recording as JSON lines and return a manifest with paths."""
        directory = Path(directory)
        entries = []
        for e in self.manifest.entries:
            path = directory / e.meta.user_id / f"{e.meta.recording_id}.jsonl"
            write_recording(path, e.meta, self.sequences[e.meta.key])
            entries.append(ManifestEntry(e.meta, str(path)))
        return Manifest(entries, self.manifest.splits)


def _draw_user(rng) -> UserTraits:
    return UserTraits(
        height=float(rng.normal(0.0, 0.07)),
        arm_span=float(1.0 + rng.normal(0.0, 0.12)),
        tempo=float(1.0 + rng.normal(0.0, 0.01)),
        smoothness=float(rng.uniform(0.2, 0.8)),
        rotation_bias=float(rng.normal(0.0, 0.3)),
    )


def _draw_activity(rng) -> ActivityBank:
    shape = (3, 6, _N_WAVES)
    return ActivityBank(
        freq=rng.uniform(0.15, 1.2, size=shape),
        amp=rng.uniform(0.3, 1.0, size=shape) / _N_WAVES,
        phase=rng.uniform(0, 2 * np.pi, size=shape),
    )


def _smooth(x: np.ndarray, alpha: float) -> np.ndarray:
    """Causal exponential smoothing along axis 0; larger alpha is smoother."""
    zi = alpha * x[:1]
    out, _ = lfilter([1 - alpha], [1, -alpha], x, axis=0, zi=zi)
    return out


def render_recording(user: UserTraits, bank: ActivityBank, duration: float, rng,
                     fps: float = FPS) -> MotionSequence:
    """Render one recording of ``bank`` performed by ``user``."""
    n = int(round(duration * fps))
    t = np.arange(n) / fps
    start = rng.uniform(0.0, 0.3)
    # per-recording wobble around the persistent traits
    height = user.height + rng.normal(0, 0.004)
    span = user.arm_span * (1 + rng.normal(0, 0.01))
    tau = (t + start) * user.tempo * (1 + rng.normal(0, 0.003))

    # (n, device, channel)
    waves = np.einsum(
        "dcw,ndcw->ndc", bank.amp,
        np.sin(2 * np.pi * bank.freq[None] * tau[:, None, None, None] + bank.phase[None]),
    )
    jitter = rng.normal(0, 1, size=waves.shape) * 0.25
    jitter = _smooth(jitter, 0.5)
    waves = _smooth(waves + jitter * (1 - user.smoothness), user.smoothness * 0.6)

    data = np.empty((n, 21))
    rest = np.array([[0.0, 1.65 + height, 0.0],
                     [-0.25 * span, 1.10 + 0.6 * height, 0.30],
                     [0.25 * span, 1.10 + 0.6 * height, 0.30]])
    bias_axis = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    for d in range(3):
        scale = 1.0 if d == 0 else span
        pos = rest[d] + waves[:, d, :3] * _POS_AMP[d] * scale
        rot = waves[:, d, 3:] * _ROT_AMP[d] + bias_axis[d] * user.rotation_bias
        if d == 0:
            rot = rot + np.array([0.1 * height, 0.0, 0.0])
        pos = pos + rng.normal(0, 0.002, size=pos.shape)
        rot = rot + rng.normal(0, 0.004, size=rot.shape)
        data[:, d * 7:d * 7 + 3] = pos
        data[:, d * 7 + 3:d * 7 + 7] = quat_from_rotvec(rot)
    return MotionSequence(t, data, fps)


def synth_generate(n_users: int, n_activities: int, recordings_per_user: int, seed: int = 0,
                   duration: float = 36.0, fps: float = FPS, user_prefix: str = "u") -> SynthCorpus:
    """Generate a deterministic corpus; each user cycles through every activity."""
    for name, v in (("n_users", n_users), ("n_activities", n_activities),
                    ("recordings_per_user", recordings_per_user)):
        if v < 1:
            raise InvalidInputError(f"{name} must be >= 1")
    if duration * fps < 2:
        raise InvalidInputError("duration too short")
    root = np.random.default_rng(seed)
    act_rng, user_rng = (np.random.default_rng(s) for s in root.spawn(2))
    activities = {f"a{a:02d}": _draw_activity(act_rng) for a in range(n_activities)}
    act_ids = list(activities)

    users, entries, sequences = {}, [], {}
    for u in range(n_users):
        uid = f"{user_prefix}{u:03d}"
        users[uid] = _draw_user(user_rng)
        order = user_rng.permutation(n_activities)
        when = _EPOCH + timedelta(days=float(user_rng.uniform(0, 30)))
        for r in range(recordings_per_user):
            aid = act_ids[order[r % n_activities]]
            when = when + timedelta(hours=float(user_rng.uniform(1, 72)))
            meta = RecordingMeta(f"{uid}-r{r:03d}", uid, aid, when, fps)
            rng = np.random.default_rng([seed, u, r])
            sequences[meta.key] = render_recording(users[uid], activities[aid], duration, rng, fps)
            entries.append(ManifestEntry(meta))
    return SynthCorpus(Manifest(entries), sequences, users, activities)
