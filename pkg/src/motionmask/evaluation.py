"""Re-identification attacks, feature-subset ablation, baseline features and
trajectory fidelity metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    DEVICES,
    FULL,
    FeatureSubset,
    InvalidInputError,
    MotionSequence,
    position_columns,
    quaternion_angle,
    quaternion_columns,
)
from .dataset import Key, Manifest, atomic_write_text
from .models import EncoderConfig
from .training import TrainConfig, train_identifier

log = logging.getLogger(__name__)

KINDS = ("oblivious", "adaptive")
DEFENSES = ("none", "deep_motion_masking")
IDENTIFIERS = ("lstm_funnel", "summary_stats_tabular")
STATS_PER_COLUMN = ("min", "max", "mean", "std", "median")
CHUNK = 30


class EvaluationError(RuntimeError):
    pass


class LeakageError(EvaluationError):
    pass


@dataclass(frozen=True)
class AdversaryScenario:
    kind: str = "oblivious"
    defense: str = "deep_motion_masking"
    identifier: str = "lstm_funnel"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}")
        if self.identifier not in IDENTIFIERS:
            raise ValueError(f"identifier must be one of {IDENTIFIERS}")


@dataclass
class LinkabilityReport:
    per_sample_accuracy: float
    per_user_accuracy: float
    n_samples: int
    n_users: int
    confusion: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.per_sample_accuracy, self.per_user_accuracy):
            if not 0.0 <= v <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


# --- identification metrics -----------------------------------------------------

def identification_report(log_probs: np.ndarray, labels: Sequence[str], classes: Sequence[str],
                          scenario: dict | None = None) -> LinkabilityReport:
    """Per-sample argmax accuracy and per-user accuracy from summed log-probabilities."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels = list(labels)
    if len(labels) == 0:
        raise EvaluationError("empty test set")
    if log_probs.shape != (len(labels), len(classes)):
        raise EvaluationError(f"log-prob shape {log_probs.shape} does not match labels/classes")
    classes = list(classes)
    unknown = set(labels) - set(classes)
    if unknown:
        raise EvaluationError(f"test labels outside the enrolled set: {sorted(unknown)[:5]}")
    truth = np.array([classes.index(u) for u in labels])
    pred = log_probs.argmax(axis=1)
    per_sample = float((pred == truth).mean())

    users = sorted(set(labels))
    hits = 0
    for u in users:
        rows = truth == classes.index(u)
        hits += int(log_probs[rows].sum(axis=0).argmax() == classes.index(u))
    counts = np.bincount(pred, minlength=len(classes))
    confusion = {
        "most_predicted": classes[int(counts.argmax())],
        "most_predicted_share": float(counts.max() / len(pred)),
        "distinct_predictions": int((counts > 0).sum()),
    }
    return LinkabilityReport(per_sample, hits / len(users), len(labels), len(users), confusion, scenario or {})


def eval_identification(model, windows, labels: Sequence[str], scenario: dict | None = None) -> LinkabilityReport:
    """Score any model exposing ``classes`` and ``log_proba(windows)``."""
    windows = np.asarray(windows)
    if len(windows) == 0:
        raise EvaluationError("empty test set")
    return identification_report(model.log_proba(windows), labels, model.classes, scenario)


# --- summary-statistic baseline -------------------------------------------------

def featurize_summary_stats(w, chunk: int = CHUNK) -> np.ndarray:
    """One row per one-second chunk: min, max, mean, std, median of every column.

    Features are column-major: ``row[c * 5 + s]`` is statistic ``s`` of column ``c``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or len(w) % chunk:
        raise InvalidInputError(f"window of shape {w.shape} is not a whole number of {chunk}-frame chunks")
    c = w.reshape(len(w) // chunk, chunk, w.shape[1])
    stats = np.stack([c.min(1), c.max(1), c.mean(1), c.std(1), np.median(c, axis=1)], axis=-1)
    return stats.reshape(len(c), -1)


def default_tabular_classifier(seed: int = 0):
    from sklearn.ensemble import RandomForestClassifier

    return RandomForestClassifier(n_estimators=200, min_samples_leaf=2, random_state=seed, n_jobs=1)


@dataclass
class TabularIdentifier:
    """Chunk-level tabular classifier; a window's score is the sum of its chunks' log-probabilities."""

    classifier: object
    classes: list[str]
    subset: FeatureSubset = FULL

    def log_proba(self, windows) -> np.ndarray:
        windows = np.asarray(windows)
        rows = np.concatenate([featurize_summary_stats(w[:, list(self.subset.columns)]) for w in windows])
        p = np.zeros((len(rows), len(self.classes)))
        p[:, self._col] = self.classifier.predict_proba(rows)
        lp = np.log(np.clip(p, 1e-6, None)).reshape(len(windows), -1, len(self.classes)).sum(axis=1)
        return lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)

    @classmethod
    def fit(cls, windows, labels: Sequence[str], seed: int = 0, factory: Callable | None = None,
            subset: FeatureSubset = FULL) -> "TabularIdentifier":
        windows = np.asarray(windows)
        classes = sorted(set(labels))
        feats = [featurize_summary_stats(w[:, list(subset.columns)]) for w in windows]
        x = np.concatenate(feats)
        y = np.concatenate([[lab] * len(f) for lab, f in zip(labels, feats)])
        clf = (factory or default_tabular_classifier)(seed)
        clf.fit(x, y)
        model = cls(clf, classes, subset)
        model._col = [classes.index(c) for c in clf.classes_]
        return model


# --- scenarios -------------------------------------------------------------------

def check_sessions(manifest: Manifest) -> None:
    s1 = {k for k, v in manifest.splits.items() if v == "session1"}
    s2 = {k for k, v in manifest.splits.items() if v == "session2"}
    if not s1 or not s2:
        raise EvaluationError("manifest must carry session1/session2 labels (see split_sessions)")
    if s1 & s2:
        raise LeakageError(f"recordings in both sessions: {sorted(s1 & s2)[:5]}")
    paths1 = {e.path for e in manifest.entries if e.meta.key in s1 and e.path}
    paths2 = {e.path for e in manifest.entries if e.meta.key in s2 and e.path}
    if paths1 & paths2:
        raise LeakageError(f"recording files in both sessions: {sorted(paths1 & paths2)[:5]}")


def session_noise(seed: int, user: str, session: str, dim: int = 32) -> np.ndarray:
    """Independent noise per (user, session), reproducible from the seed."""
    tag = [ord(ch) for ch in f"{user}\x00{session}"]
    return np.random.default_rng([seed, *tag]).standard_normal(dim)


def anonymize_session(manifest: Manifest, windows: Mapping[Key, np.ndarray], bundle, session: str,
                      seed: int) -> dict[Key, np.ndarray]:
    from .runtime import anonymize_array

    dim = bundle.arch.anonymizer.noise_dim
    out = {}
    for e in manifest.subset(session).entries:
        noise = session_noise(seed, e.meta.user_id, session, dim)
        out[e.meta.key] = anonymize_array(windows[e.meta.key], bundle, noise).astype(np.float32)
    return out


def _stack(manifest: Manifest, session: str, windows):
    ents = manifest.subset(session).entries
    return np.stack([windows[e.meta.key] for e in ents]), [e.meta.user_id for e in ents]


def _train_split(manifest: Manifest, val_per_user: int, seed: int) -> Manifest:
    """Label session 1 as train/val (last ``val_per_user`` per user, shuffled) and session 2 as test."""
    rng = np.random.default_rng(seed)
    splits = {}
    for user, ents in sorted(manifest.subset("session1").by_user().items()):
        order = rng.permutation(len(ents))
        for rank, i in enumerate(order):
            splits[ents[i].meta.key] = "val" if rank < val_per_user else "train"
    for k, v in manifest.splits.items():
        if v == "session2":
            splits[k] = "test"
    return manifest.with_splits(splits)


def _fit_identifier(kind: str, manifest: Manifest, train_windows, cfg: TrainConfig, enc_cfg: EncoderConfig,
                    seed: int, subset: FeatureSubset = FULL, val_per_user: int = 2):
    if kind == "lstm_funnel":
        split = _train_split(manifest, val_per_user, seed)
        sub = split.subset(None)
        keep = {k for k, v in split.splits.items() if v in ("train", "val")}
        train_only = Manifest([e for e in sub.entries if e.meta.key in keep],
                              {k: v for k, v in split.splits.items() if k in keep})
        model, _ = train_identifier(train_only, train_windows, cfg, enc_cfg, subset)
        return model
    x, users = _stack(manifest, "session1", train_windows)
    return TabularIdentifier.fit(x, users, seed=seed, subset=subset)


def run_scenario(s: AdversaryScenario, manifest: Manifest, windows: Mapping[Key, np.ndarray], bundle=None,
                 cfg: TrainConfig | None = None, enc_cfg: EncoderConfig = EncoderConfig(), seed: int = 0,
                 cache: dict | None = None) -> LinkabilityReport:
    """Train the adversary on session 1 and identify session 2.

    ``cache`` (any dict) lets a grid of scenarios share trained adversaries and
    anonymized sessions.
    """
    check_sessions(manifest)
    cfg = cfg or TrainConfig()
    cache = {} if cache is None else cache
    defended = s.defense == "deep_motion_masking"
    if defended:
        if bundle is None:
            raise EvaluationError("the deep_motion_masking defense needs a trained bundle")
        bundle.require_runtime()
        for session in ("session1", "session2"):
            if ("anon", session) not in cache:
                cache[("anon", session)] = anonymize_session(manifest, windows, bundle, session, seed)
    anon_train = defended and s.kind == "adaptive"
    model_key = ("model", s.identifier, anon_train)
    if model_key not in cache:
        train_w = cache[("anon", "session1")] if anon_train else windows
        cache[model_key] = _fit_identifier(s.identifier, manifest, train_w, cfg, enc_cfg, seed)
    model = cache[model_key]
    test_w = cache[("anon", "session2")] if defended else windows
    x, users = _stack(manifest, "session2", test_w)
    return eval_identification(model, x, users, scenario=asdict(s))


def run_table(manifest: Manifest, windows, bundle, cfg: TrainConfig | None = None,
              enc_cfg: EncoderConfig = EncoderConfig(), identifiers: Sequence[str] = ("lstm_funnel",),
              seed: int = 0) -> list[LinkabilityReport]:
    """Every (defense, kind, identifier) cell, sharing trained adversaries."""
    cache: dict = {}
    out = []
    for ident in identifiers:
        for defense in DEFENSES:
            if defense == "deep_motion_masking" and bundle is None:
                continue
            for kind in KINDS:
                out.append(run_scenario(AdversaryScenario(kind, defense, ident), manifest, windows, bundle,
                                        cfg, enc_cfg, seed, cache))
    return out


def ablate_feature_subsets(manifest: Manifest, windows: Mapping[Key, np.ndarray], subsets: Sequence[FeatureSubset],
                           cfg: TrainConfig, enc_cfg: EncoderConfig = EncoderConfig()) -> list[dict]:
    """Train and test the LSTM funnel on each column subset (train/val/test splits required)."""
    rows = []
    for fs in subsets:
        if not fs.columns:
            raise InvalidInputError(f"feature subset {fs.name!r} is empty")
        model, rep = train_identifier(manifest, windows, cfg, enc_cfg, fs)
        test = manifest.subset("test")
        x = np.stack([windows[k] for k in test.keys])
        r = eval_identification(model, x, [k[0] for k in test.keys])
        rows.append({"subset": fs.name, "n_features": len(fs.columns),
                     "per_sample_accuracy": r.per_sample_accuracy, "per_user_accuracy": r.per_user_accuracy,
                     "epochs": rep.stopped_epoch})
    return rows


# --- fidelity --------------------------------------------------------------------

def trajectory_deviation(original: MotionSequence, anonymized: MotionSequence) -> dict:
    """Per-device positional deviation (cm) and geodesic rotational deviation (degrees)."""
    if len(original) != len(anonymized):
        raise InvalidInputError(f"frame counts differ: {len(original)} vs {len(anonymized)}")
    if not np.allclose(original.t, anonymized.t, rtol=0, atol=1e-9):
        raise InvalidInputError("timestamps differ")
    out = {}
    for dev in DEVICES:
        pc, qc = position_columns(dev), quaternion_columns(dev)
        pos = np.linalg.norm(original.data[:, pc] - anonymized.data[:, pc], axis=1) * 100.0
        rot = np.degrees(quaternion_angle(original.data[:, qc], anonymized.data[:, qc]))
        # arccos near 1 leaves ~1e-6 deg of rounding; identical quaternions should report 0
        rot[np.all(original.data[:, qc] == anonymized.data[:, qc], axis=1)] = 0.0
        out[dev] = {
            "position_cm": _summary(pos),
            "rotation_deg": _summary(rot),
        }
    return out


def _summary(x: np.ndarray) -> dict:
    return {"mean": float(x.mean()), "p50": float(np.percentile(x, 50)),
            "p95": float(np.percentile(x, 95)), "max": float(x.max())}


# --- reports -------------------------------------------------------------------

_ROW_NAMES = {"none": "Unmodified", "deep_motion_masking": "Deep motion masking"}
_ID_NAMES = {"lstm_funnel": "LSTM funnel", "summary_stats_tabular": "Summary-stat tabular"}


def _grid(reports: Sequence[LinkabilityReport]) -> tuple[list[str], list[str], dict]:
    idents = [i for i in IDENTIFIERS if any(r.scenario.get("identifier") == i for r in reports)]
    defenses = [d for d in DEFENSES if any(r.scenario.get("defense") == d for r in reports)]
    cells = {}
    for r in reports:
        s = r.scenario
        cells[(s.get("defense"), s.get("identifier"), s.get("kind"))] = r
    return defenses, idents, cells


def render_markdown(reports: Sequence[LinkabilityReport], extra: dict | None = None) -> str:
    lines = ["# Identification accuracy (per-sample / per-user)", ""]
    defenses, idents, cells = _grid(reports)
    if idents:
        head = ["Defense"] + [f"{_ID_NAMES[i]} {k}" for i in idents for k in KINDS]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "---|" * len(head))
        for d in defenses:
            row = [_ROW_NAMES[d]]
            for i in idents:
                for k in KINDS:
                    r = cells.get((d, i, k))
                    row.append("n/a" if r is None else
                               f"{100 * r.per_sample_accuracy:.1f}% / {100 * r.per_user_accuracy:.1f}%")
            lines.append("| " + " | ".join(row) + " |")
    else:
        lines.append("_no scenarios_")
    for title, value in (extra or {}).items():
        lines += ["", f"## {title}", "", "```json", json.dumps(value, indent=1, sort_keys=True), "```"]
    return "\n".join(lines) + "\n"


def emit_report(reports: Sequence[LinkabilityReport], path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``report.json`` and ``report.md`` into directory ``path``."""
    path = Path(path)
    order = {(d, i, k): n for n, (d, i, k) in enumerate(
        (d, i, k) for d in DEFENSES for i in IDENTIFIERS for k in KINDS)}
    ordered = sorted(reports, key=lambda r: order.get(
        (r.scenario.get("defense"), r.scenario.get("identifier"), r.scenario.get("kind")), len(order)))
    doc = {"reports": [r.to_dict() for r in ordered], "extra": extra or {}}
    jp, mp = path / "report.json", path / "report.md"
    atomic_write_text(jp, json.dumps(doc, indent=1, sort_keys=True))
    atomic_write_text(mp, render_markdown(ordered, extra))
    return jp, mp


def load_report(path) -> list[LinkabilityReport]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [LinkabilityReport(**r) for r in doc["reports"]]
