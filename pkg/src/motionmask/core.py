"""Geometric and numeric primitives for three-device VR telemetry.

Quaternions are stored scalar-last, ``(i, j, k, w)``. A frame flattens to 21
scalars in a fixed column order: head, left hand, right hand, each as
``x, y, z, i, j, k, w``. Every model and file in the package uses this order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEVICES = ("head", "left", "right")
AXES = ("x", "y", "z", "i", "j", "k", "w")
N_DIMS = len(DEVICES) * len(AXES)
COLUMNS = tuple(f"{d}.{a}" for d in DEVICES for a in AXES)

FPS = 30.0
WINDOW_FRAMES = 900
STD_FLOOR = 1e-6
_SLERP_LERP_THRESHOLD = 0.9995


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition."""


class TooShortError(InvalidInputError):
    """Raised when a sequence is shorter than one window and padding is off."""


def column_index(device: str, axis: str) -> int:
    return DEVICES.index(device) * len(AXES) + AXES.index(axis)


def position_columns(device: str) -> list[int]:
    base = DEVICES.index(device) * len(AXES)
    return [base, base + 1, base + 2]


def quaternion_columns(device: str) -> list[int]:
    base = DEVICES.index(device) * len(AXES)
    return [base + 3, base + 4, base + 5, base + 6]


POSITION_COLUMNS = [c for d in DEVICES for c in position_columns(d)]
QUATERNION_BLOCKS = [quaternion_columns(d) for d in DEVICES]


def _finite_array(x, shape_tail: int | None = None, name: str = "value") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if shape_tail is not None and (a.ndim == 0 or a.shape[-1] != shape_tail):
        raise InvalidInputError(f"{name} must have trailing dimension {shape_tail}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def normalize_quaternion(q) -> np.ndarray:
    """Scale quaternion(s) along the last axis to unit norm."""
    q = _finite_array(q, 4, "quaternion")
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidInputError("zero-norm quaternion")
    return q / n


def renormalize_quaternions(data: np.ndarray) -> np.ndarray:
    """Return a copy of ``(..., 21)`` data with every device quaternion unit-norm.

    Zero quaternions (possible only from a degenerate model output) become identity.
    """
    out = np.array(data, dtype=np.float64, copy=True)
    for cols in QUATERNION_BLOCKS:
        q = out[..., cols]
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        bad = n[..., 0] < 1e-12
        q = q / np.where(n < 1e-12, 1.0, n)
        q[bad] = (0.0, 0.0, 0.0, 1.0)
        out[..., cols] = q
    return out


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = _finite_array(self.position, 3, "position").copy()
        q = normalize_quaternion(self.orientation).copy()
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:3], a[3:7])


@dataclass(frozen=True)
class MotionFrame:
    head: Pose
    left_hand: Pose
    right_hand: Pose
    t: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.head.to_array(), self.left_hand.to_array(), self.right_hand.to_array()])

    @classmethod
    def from_array(cls, a, t: float = 0.0) -> "MotionFrame":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (N_DIMS,):
            raise InvalidInputError(f"frame array must have shape ({N_DIMS},), got {a.shape}")
        return cls(Pose.from_array(a[0:7]), Pose.from_array(a[7:14]), Pose.from_array(a[14:21]), float(t))


@dataclass(frozen=True)
class MotionSequence:
    """Timestamped telemetry stored column-wise as ``t (N,)`` and ``data (N, 21)``."""

    t: np.ndarray
    data: np.ndarray
    nominal_fps: float = FPS

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        data = np.asarray(self.data, dtype=np.float64)
        if t.ndim != 1 or len(t) == 0:
            raise InvalidInputError("sequence must contain at least one frame")
        if data.shape != (len(t), N_DIMS):
            raise InvalidInputError(f"data must have shape ({len(t)}, {N_DIMS}), got {data.shape}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(data))):
            raise InvalidInputError("sequence contains non-finite values")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        data = renormalize_quaternions(data)
        t.flags.writeable = False
        data.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def frames(self) -> list[MotionFrame]:
        return [MotionFrame.from_array(row, t) for row, t in zip(self.data, self.t)]

    @classmethod
    def from_frames(cls, frames: Sequence[MotionFrame], nominal_fps: float = FPS) -> "MotionSequence":
        frames = list(frames)
        if not frames:
            raise InvalidInputError("sequence must contain at least one frame")
        return cls(np.array([f.t for f in frames]), np.stack([f.to_array() for f in frames]), nominal_fps)


@dataclass(frozen=True)
class DimensionStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = _finite_array(self.mean, None, "mean").reshape(-1)
        std = _finite_array(self.std, None, "std").reshape(-1)
        if mean.shape != std.shape:
            raise InvalidInputError("mean and std must have equal length")
        if np.any(std <= 0):
            raise InvalidInputError("std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, n: int = N_DIMS) -> "DimensionStats":
        return cls(np.zeros(n), np.ones(n))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DimensionStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass(frozen=True)
class FeatureSubset:
    name: str
    columns: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        cols = tuple(int(c) for c in self.columns)
        if len(set(cols)) != len(cols):
            raise InvalidInputError(f"feature subset {self.name!r} has duplicate columns")
        if any(c < 0 or c >= N_DIMS for c in cols):
            raise InvalidInputError(f"feature subset {self.name!r} has out-of-range columns")
        object.__setattr__(self, "columns", cols)

    @classmethod
    def from_product(cls, name: str, devices: Iterable[str], axes: Iterable[str]) -> "FeatureSubset":
        axes = list(axes)
        return cls(name, tuple(column_index(d, a) for d in devices for a in axes))


FULL = FeatureSubset.from_product("full", DEVICES, AXES)
HANDS = FeatureSubset.from_product("hands", ("left", "right"), AXES)
HAND_ROTATIONS = FeatureSubset.from_product("hand_rotations", ("left", "right"), "ijkw")
LEFT_ROTATION = FeatureSubset.from_product("left_rotation", ("left",), "ijkw")
LEFT_W = FeatureSubset.from_product("left_w", ("left",), "w")
ABLATION_SUBSETS = (FULL, HANDS, HAND_ROTATIONS, LEFT_ROTATION, LEFT_W)


def lerp_position(a, b, u):
    a = _finite_array(a, None, "a")
    b = _finite_array(b, None, "b")
    u = _finite_array(u, None, "u")
    if np.any((u < 0) | (u > 1)):
        raise InvalidInputError("interpolation parameter must lie in [0, 1]")
    if u.ndim:
        u = u[..., None]
    return a + u * (b - a)


def slerp_orientation(q0, q1, u):
    """Shortest-arc spherical interpolation; broadcasts over leading axes.

    Falls back to normalized lerp when the quaternions are nearly parallel.
    """
    q0 = normalize_quaternion(q0)
    q1 = normalize_quaternion(q1)
    u = _finite_array(u, None, "u")
    if np.any((u < 0) | (u > 1)):
        raise InvalidInputError("interpolation parameter must lie in [0, 1]")
    q0, q1 = np.broadcast_arrays(q0, q1)
    dot = np.sum(q0 * q1, axis=-1)
    q1 = np.where((dot < 0)[..., None], -q1, q1)
    dot = np.abs(dot)
    u = np.broadcast_to(u, dot.shape)

    theta0 = np.arccos(np.clip(dot, -1.0, 1.0))
    sin0 = np.sin(theta0)
    near = dot > _SLERP_LERP_THRESHOLD
    safe_sin0 = np.where(near, 1.0, sin0)
    s0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta0) / safe_sin0)
    s1 = np.where(near, u, np.sin(u * theta0) / safe_sin0)
    out = s0[..., None] * q0 + s1[..., None] * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def interpolate_frames(a: np.ndarray, b: np.ndarray, u) -> np.ndarray:
    """Interpolate ``(..., 21)`` frame arrays: lerp on positions, slerp per device quaternion."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    for dev in DEVICES:
        pc, qc = position_columns(dev), quaternion_columns(dev)
        out[..., pc] = lerp_position(a[..., pc], b[..., pc], u)
        out[..., qc] = slerp_orientation(a[..., qc], b[..., qc], u)
    return out


def resample(seq: MotionSequence, target_fps: float = FPS) -> MotionSequence:
    """Resample onto the uniform grid ``t0 + k / target_fps`` covering the sequence."""
    if target_fps <= 0:
        raise InvalidInputError("target_fps must be positive")
    if len(seq) < 2:
        raise InvalidInputError("resampling needs at least two frames")
    t0, t1 = seq.t[0], seq.t[-1]
    # tolerate float jitter at the end so a uniform grid maps onto itself
    n = int(np.floor((t1 - t0) * target_fps + 1e-6)) + 1
    grid = t0 + np.arange(n) / target_fps
    grid = np.minimum(grid, t1)
    idx = np.clip(np.searchsorted(seq.t, grid, side="right") - 1, 0, len(seq) - 2)
    left, right = seq.t[idx], seq.t[idx + 1]
    u = np.clip((grid - left) / (right - left), 0.0, 1.0)
    data = interpolate_frames(seq.data[idx], seq.data[idx + 1], u)
    return MotionSequence(t0 + np.arange(n) / target_fps, data, target_fps)


def window(seq: MotionSequence, frames: int = WINDOW_FRAMES, pad: bool = True) -> np.ndarray:
    """First ``frames`` rows of a 30 fps sequence; short input is padded with its last frame."""
    data = seq.data
    if len(data) >= frames:
        return np.array(data[:frames])
    if not pad:
        raise TooShortError(f"sequence has {len(data)} frames, need {frames}")
    tail = np.repeat(data[-1:], frames - len(data), axis=0)
    return np.concatenate([data, tail])


def check_window(w, frames: int = WINDOW_FRAMES) -> np.ndarray:
    w = np.asarray(w)
    if w.shape != (frames, N_DIMS):
        raise InvalidInputError(f"window must have shape ({frames}, {N_DIMS}), got {w.shape}")
    return w


def zscore_fit(windows: Iterable[np.ndarray]) -> DimensionStats:
    """Per-column mean/std over all rows of all windows (population std, floored)."""
    arrays = [np.asarray(w, dtype=np.float64) for w in windows]
    if not arrays:
        raise InvalidInputError("zscore_fit needs at least one window")
    n = 0
    total = np.zeros(arrays[0].shape[-1])
    for a in arrays:
        total += a.sum(axis=0)
        n += len(a)
    mean = total / n
    sq = np.zeros_like(mean)
    for a in arrays:
        sq += ((a - mean) ** 2).sum(axis=0)
    std = np.sqrt(sq / n)
    return DimensionStats(mean, np.maximum(std, STD_FLOOR))


def zscore_apply(w, stats: DimensionStats) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != len(stats.mean):
        raise InvalidInputError("stats dimension does not match data")
    return (w - stats.mean) / stats.std


def zscore_invert(w, stats: DimensionStats) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != len(stats.mean):
        raise InvalidInputError("stats dimension does not match data")
    return w * stats.std + stats.mean


def select_features(w, fs: FeatureSubset) -> np.ndarray:
    w = np.asarray(w)
    if w.shape[-1] != N_DIMS:
        raise InvalidInputError(f"expected {N_DIMS} columns, got {w.shape[-1]}")
    return w[..., list(fs.columns)]


def quaternion_angle(q0, q1) -> np.ndarray:
    """Geodesic angle in radians between unit quaternions, hemisphere-safe."""
    q0 = normalize_quaternion(q0)
    q1 = normalize_quaternion(q1)
    d = np.abs(np.sum(q0 * q1, axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def quat_from_rotvec(rv) -> np.ndarray:
    """Rotation vectors ``(..., 3)`` to unit quaternions ``(..., 4)``."""
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a with its small-angle limit
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([rv * k, np.cos(half)], axis=-1)
