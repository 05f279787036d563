"""Recording ingestion, manifests, splits and pair sampling.

Recording files are JSON lines. The first line is a metadata object
``{recording_id, user_id, activity_id, created_at, fps}``; every following
line is one frame ``{t, head: {x,y,z,i,j,k,w}, left: {...}, right: {...}}``.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .core import AXES, DEVICES, N_DIMS, InvalidInputError, MotionSequence, resample, window

log = logging.getLogger(__name__)

NOISE_DIM = 32
Key = tuple[str, str]


class IngestError(Exception):
    def __init__(self, issues):
        self.issues = list(issues)
        lines = "\n".join(f"  {i.path}: {i.reason}" for i in self.issues)
        super().__init__(f"{len(self.issues)} recording(s) rejected:\n{lines}")


class SamplingError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class RecordingMeta:
    recording_id: str
    user_id: str
    activity_id: str
    created_at: datetime
    fps: float = 30.0

    @property
    def key(self) -> Key:
        return (self.user_id, self.recording_id)

    def to_dict(self) -> dict:
        return {
            "recording_id": self.recording_id,
            "user_id": self.user_id,
            "activity_id": self.activity_id,
            "created_at": self.created_at.isoformat(),
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RecordingMeta":
        for name in ("recording_id", "user_id", "activity_id"):
            if not isinstance(d.get(name), str) or not d[name]:
                raise InvalidInputError(f"metadata field {name!r} must be a non-empty string")
        if "created_at" not in d:
            raise InvalidInputError("metadata field 'created_at' missing")
        try:
            created = datetime.fromisoformat(str(d["created_at"]))
        except ValueError as exc:
            raise InvalidInputError(f"bad created_at: {d['created_at']!r}") from exc
        fps = float(d.get("fps", 30.0))
        if not fps > 0:
            raise InvalidInputError("fps must be positive")
        return cls(d["recording_id"], d["user_id"], d["activity_id"], created, fps)


@dataclass(frozen=True)
class ManifestEntry:
    meta: RecordingMeta
    path: str | None = None


@dataclass(frozen=True)
class Rejection:
    path: str
    reason: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()
    splits: Mapping[Key, str] = field(default_factory=dict)
    rejected: tuple[Rejection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.meta.key in seen:
                raise InvalidInputError(f"duplicate recording {e.meta.key}")
            seen.add(e.meta.key)
        unknown = set(self.splits) - seen
        if unknown:
            raise InvalidInputError(f"split labels for unknown recordings: {sorted(unknown)[:5]}")
        object.__setattr__(self, "splits", dict(self.splits))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def keys(self) -> list[Key]:
        return [e.meta.key for e in self.entries]

    @property
    def users(self) -> list[str]:
        return sorted({e.meta.user_id for e in self.entries})

    @property
    def activities(self) -> list[str]:
        return sorted({e.meta.activity_id for e in self.entries})

    def meta(self, key: Key) -> RecordingMeta:
        for e in self.entries:
            if e.meta.key == key:
                return e.meta
        raise KeyError(key)

    def by_user(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.meta.user_id, []).append(e)
        return out

    def subset(self, split: str | None = None, users: Iterable[str] | None = None) -> "Manifest":
        users = set(users) if users is not None else None
        keep = [
            e for e in self.entries
            if (split is None or self.splits.get(e.meta.key) == split)
            and (users is None or e.meta.user_id in users)
        ]
        keys = {e.meta.key for e in keep}
        return Manifest(keep, {k: v for k, v in self.splits.items() if k in keys})

    def with_splits(self, splits: Mapping[Key, str]) -> "Manifest":
        return replace(self, splits=dict(splits))

    def to_dict(self) -> dict:
        return {
            "entries": [
                {**e.meta.to_dict(), "path": e.path, "split": self.splits.get(e.meta.key)}
                for e in self.entries
            ],
            "rejected": [{"path": r.path, "reason": r.reason} for r in self.rejected],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Manifest":
        entries, splits = [], {}
        for item in d.get("entries", []):
            meta = RecordingMeta.from_dict(item)
            entries.append(ManifestEntry(meta, item.get("path")))
            if item.get("split") is not None:
                splits[meta.key] = item["split"]
        rejected = tuple(Rejection(r["path"], r["reason"]) for r in d.get("rejected", []))
        return cls(entries, splits, rejected)

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class PairSample:
    window_a: np.ndarray
    window_b: np.ndarray
    label: bool
    meta_a: RecordingMeta
    meta_b: RecordingMeta


@dataclass(frozen=True)
class AnonTrainSample:
    window_a: np.ndarray
    window_b: np.ndarray
    noise_a: np.ndarray
    noise_b: np.ndarray
    noise_equal: bool
    meta_a: RecordingMeta | None = None
    meta_b: RecordingMeta | None = None


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- recording files -------------------------------------------------------

def _frame_to_dict(t: float, row: np.ndarray) -> dict:
    d: dict = {"t": float(t)}
    for di, dev in enumerate(DEVICES):
        d[dev] = {a: float(row[di * 7 + ai]) for ai, a in enumerate(AXES)}
    return d


def _frame_from_dict(d: Mapping) -> tuple[float, list[float]]:
    t = float(d["t"])
    row = [float(d[dev][a]) for dev in DEVICES for a in AXES]
    return t, row


def format_frame(t: float, row: np.ndarray) -> str:
    return json.dumps(_frame_to_dict(t, row), separators=(",", ":"))


def parse_frame(line: str) -> tuple[float, np.ndarray]:
    try:
        t, row = _frame_from_dict(json.loads(line))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed frame: {exc}") from exc
    return t, np.array(row)


def write_recording(path, meta: RecordingMeta, seq: MotionSequence) -> None:
    lines = [json.dumps(meta.to_dict(), separators=(",", ":"))]
    lines += [format_frame(t, row) for t, row in zip(seq.t, seq.data)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_recording(path) -> tuple[RecordingMeta, MotionSequence]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise InvalidInputError("empty recording file")
    try:
        meta = RecordingMeta.from_dict(json.loads(lines[0]))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"header is not JSON: {exc}") from exc
    if len(lines) < 2:
        raise InvalidInputError("recording has no frames")
    ts, rows = [], []
    for n, line in enumerate(lines[1:], start=2):
        try:
            t, row = _frame_from_dict(json.loads(line))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"line {n}: malformed frame ({exc})") from exc
        ts.append(t)
        rows.append(row)
    data = np.array(rows)
    for d in range(3):
        if np.any(np.linalg.norm(data[:, d * 7 + 3:d * 7 + 7], axis=1) == 0):
            raise InvalidInputError("zero-norm quaternion in frames")
    return meta, MotionSequence(np.array(ts), data, meta.fps)


def ingest(path, strict: bool = False) -> Manifest:
    """Scan a directory (or a single file) of ``*.jsonl`` recordings.

    Malformed files and duplicate ``(user_id, recording_id)`` pairs are listed
    in ``Manifest.rejected``; with ``strict=True`` any rejection raises.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.rglob("*.jsonl"))
    elif path.is_file():
        files = [path]
    else:
        raise IngestError([Rejection(str(path), "path does not exist")])
    if not files:
        log.warning("no recordings found under %s", path)

    entries, rejected, seen = [], [], set()
    for f in files:
        try:
            meta, _ = read_recording(f)
        except (OSError, UnicodeDecodeError, InvalidInputError) as exc:
            rejected.append(Rejection(str(f), str(exc)))
            continue
        if meta.key in seen:
            rejected.append(Rejection(str(f), f"duplicate (user_id, recording_id) {meta.key}"))
            continue
        seen.add(meta.key)
        entries.append(ManifestEntry(meta, str(f)))
    if rejected:
        log.warning("%d recording(s) rejected during ingestion", len(rejected))
        if strict:
            raise IngestError(rejected)
    return Manifest(entries, {}, tuple(rejected))


def prepare_windows(
    manifest: Manifest,
    sequences: Mapping[Key, MotionSequence] | None = None,
    pad: bool = True,
) -> dict[Key, np.ndarray]:
    """Resample every recording to 30 fps and cut its first window."""
    out = {}
    for e in manifest.entries:
        if sequences is not None and e.meta.key in sequences:
            seq = sequences[e.meta.key]
        elif e.path is not None:
            _, seq = read_recording(e.path)
        else:
            raise InvalidInputError(f"no data for recording {e.meta.key}")
        out[e.meta.key] = window(resample(seq), pad=pad).astype(np.float32)
    return out


# --- splits ----------------------------------------------------------------

def split_recordings(manifest: Manifest, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                     labels=("train", "val", "test")) -> Manifest:
    """Per-user random split so every user appears in every split where possible."""
    rng = np.random.default_rng(seed)
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    splits = {}
    for user, ents in sorted(manifest.by_user().items()):
        keys = [e.meta.key for e in ents]
        order = rng.permutation(len(keys))
        counts = np.floor(fr * len(keys)).astype(int)
        # give leftovers to the later splits first so val/test are non-empty
        for i in range(len(keys) - counts.sum()):
            counts[len(counts) - 1 - (i % len(counts))] += 1
        bounds = np.cumsum(counts)
        for pos, k in enumerate(order):
            splits[keys[k]] = labels[int(np.searchsorted(bounds, pos, side="right"))]
    return manifest.with_splits(splits)


def split_sessions(manifest: Manifest, users: int, per_session: int, seed: int = 0,
                   min_recordings: int | None = None, max_recordings: int | None = None) -> Manifest:
    """Pick ``users`` eligible users and give each two chronological sessions.

    Eligible users have between ``min_recordings`` (default ``2 * per_session``)
    and ``max_recordings`` recordings. Returns a manifest restricted to the
    chosen recordings, labelled ``session1`` (earlier) and ``session2``.
    """
    need = 2 * per_session
    lo = need if min_recordings is None else max(min_recordings, need)
    by_user = manifest.by_user()
    short = sorted(u for u, e in by_user.items() if len(e) < need)
    eligible = sorted(
        u for u, e in by_user.items()
        if len(e) >= lo and (max_recordings is None or len(e) <= max_recordings)
    )
    if len(eligible) < users:
        raise SplitError(
            f"need {users} users with {lo}..{max_recordings or 'inf'} recordings, "
            f"found {len(eligible)}; users short of {need} recordings: {short}"
        )
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(eligible, size=users, replace=False).tolist())
    keep, splits = [], {}
    for u in chosen:
        ents = by_user[u]
        picked = [ents[i] for i in sorted(rng.choice(len(ents), size=need, replace=False))]
        picked.sort(key=lambda e: (e.meta.created_at, e.meta.recording_id))
        for i, e in enumerate(picked):
            keep.append(e)
            splits[e.meta.key] = "session1" if i < per_session else "session2"
    return Manifest(keep, splits)


# --- pair sampling ---------------------------------------------------------

_ENUMERATE_LIMIT = 3000


def _codes(values: list[str]) -> np.ndarray:
    _, inv = np.unique(np.array(values, dtype=object).astype(str), return_inverse=True)
    return inv


def _pair_sample(keys, pair_ok: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 n: int, rng: np.random.Generator, what: str) -> list[tuple[int, int]]:
    """Draw ``n`` distinct unordered index pairs satisfying ``pair_ok``."""
    if n == 0:
        return []
    m = len(keys)
    if m <= _ENUMERATE_LIMIT:
        ia, ib = np.triu_indices(m, 1)
        ok = pair_ok(ia, ib)
        ia, ib = ia[ok], ib[ok]
        if len(ia) < n:
            raise SamplingError(f"requested {n} {what} pairs but only {len(ia)} exist")
        pick = rng.choice(len(ia), size=n, replace=False)
        return [(int(ia[p]), int(ib[p])) for p in pick]
    chosen: set[tuple[int, int]] = set()
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 10_000:
            raise SamplingError(f"could not find {n} distinct {what} pairs")
        a, b = rng.integers(m, size=2)
        if a == b:
            continue
        a, b = (a, b) if a < b else (b, a)
        if (a, b) in chosen or not pair_ok(np.array([a]), np.array([b]))[0]:
            continue
        chosen.add((a, b))
        out.append((int(a), int(b)))
    return out


def _orient(rng, a, b):
    return (a, b) if rng.random() < 0.5 else (b, a)


def _labelled_pairs(manifest, windows, n_same, n_diff, seed, fixed: str, target: str, what: str):
    if n_same < 0 or n_diff < 0:
        raise SamplingError("pair counts must be non-negative")
    metas = [e.meta for e in manifest.entries]
    rng = np.random.default_rng(seed)
    if n_same == 0 and n_diff == 0:
        return []
    fixed_c = _codes([getattr(m, fixed) for m in metas])
    target_c = _codes([getattr(m, target) for m in metas])
    if len(set(target_c.tolist())) < 2 and n_diff > 0:
        raise SamplingError(f"{what} sampling needs at least two distinct {target} values")
    same = _pair_sample(metas, lambda a, b: (fixed_c[a] != fixed_c[b]) & (target_c[a] == target_c[b]),
                        n_same, rng, f"same-{what}")
    diff = _pair_sample(metas, lambda a, b: (fixed_c[a] != fixed_c[b]) & (target_c[a] != target_c[b]),
                        n_diff, rng, f"different-{what}")
    items = [(p, True) for p in same] + [(p, False) for p in diff]
    out = []
    for i in rng.permutation(len(items)):
        (a, b), label = items[i]
        a, b = _orient(rng, a, b)
        ma, mb = metas[a], metas[b]
        out.append(PairSample(windows[ma.key], windows[mb.key], label, ma, mb))
    return out


def sample_action_pairs(manifest: Manifest, windows: Mapping[Key, np.ndarray],
                        n_same: int, n_diff: int, seed: int = 0) -> list[PairSample]:
    """Cross-user pairs labelled by whether both recordings share an activity."""
    return _labelled_pairs(manifest, windows, n_same, n_diff, seed, "user_id", "activity_id", "action")


def sample_user_pairs(manifest: Manifest, windows: Mapping[Key, np.ndarray],
                      n_same: int, n_diff: int, seed: int = 0) -> list[PairSample]:
    """Cross-activity pairs labelled by whether both recordings share a user."""
    return _labelled_pairs(manifest, windows, n_same, n_diff, seed, "activity_id", "user_id", "user")


def sample_anonymizer_pairs(manifest: Manifest, windows: Mapping[Key, np.ndarray], n: int,
                            noise_dim: int = NOISE_DIM, seed: int = 0) -> list[AnonTrainSample]:
    """Same-user recording pairs with Gaussian noise; ``n // 2`` share their noise."""
    if n < 0:
        raise SamplingError("n must be non-negative")
    if n == 0:
        return []
    metas = [e.meta for e in manifest.entries]
    rng = np.random.default_rng(seed)
    user_c = _codes([m.user_id for m in metas])
    pairs = _pair_sample(metas, lambda a, b: user_c[a] == user_c[b], n, rng, "same-user")
    flags = np.zeros(n, dtype=bool)
    flags[: n // 2] = True
    flags = rng.permutation(flags)
    out = []
    for (a, b), equal in zip(pairs, flags):
        a, b = _orient(rng, a, b)
        na = rng.standard_normal(noise_dim).astype(np.float32)
        nb = na.copy() if equal else rng.standard_normal(noise_dim).astype(np.float32)
        ma, mb = metas[a], metas[b]
        out.append(AnonTrainSample(windows[ma.key], windows[mb.key], na, nb, bool(equal), ma, mb))
    return out
