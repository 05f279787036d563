import json

import numpy as np
import pytest

from motionmask.core import MotionSequence, quat_from_rotvec
from motionmask.dataset import Manifest, split_sessions
from motionmask.evaluation import (
    AdversaryScenario,
    EvaluationError,
    LeakageError,
    LinkabilityReport,
    TabularIdentifier,
    check_sessions,
    emit_report,
    featurize_summary_stats,
    identification_report,
    load_report,
    render_markdown,
    run_scenario,
    run_table,
    session_noise,
    trajectory_deviation,
)

from conftest import random_frames
from oracles import per_user_brute, summary_stats_brute


def test_featurizer_matches_brute_force():
    rng = np.random.default_rng(0)
    for n in (30, 90, 900):
        w = rng.normal(size=(n, 21)) * rng.uniform(0.1, 5, 21)
        got = featurize_summary_stats(w)
        assert got.shape == (n // 30, 105)
        assert np.max(np.abs(got - summary_stats_brute(w))) <= 1e-9


def test_featurizer_rejects_partial_chunk():
    with pytest.raises(ValueError):
        featurize_summary_stats(np.zeros((31, 21)))


def test_per_user_aggregation_matches_brute_force():
    rng = np.random.default_rng(1)
    classes = ["ann", "bo", "cy"]
    for _ in range(50):
        labels = list(rng.choice(classes, size=12))
        lp = np.log(rng.dirichlet(np.ones(3), size=12))
        rep = identification_report(lp, labels, classes)
        brute = per_user_brute(lp, labels, classes)
        want = sum(brute[u] == u for u in brute) / len(brute)
        assert rep.per_user_accuracy == want
        assert rep.per_sample_accuracy == np.mean([classes[i] == lab for i, lab in zip(lp.argmax(1), labels)])


def test_per_user_can_beat_or_trail_per_sample():
    classes = ["a", "b"]
    lp = np.log(np.array([[0.9, 0.1], [0.45, 0.55], [0.45, 0.55], [0.1, 0.9]]))
    rep = identification_report(lp, ["a", "a", "a", "b"], classes)
    assert rep.per_sample_accuracy == 0.5 and rep.per_user_accuracy == 1.0
    lp = np.log(np.array([[0.01, 0.99], [0.6, 0.4], [0.6, 0.4]]))
    rep = identification_report(lp, ["a", "a", "a"], classes)
    assert rep.per_sample_accuracy == pytest.approx(2 / 3) and rep.per_user_accuracy == 0.0


def test_report_validation():
    with pytest.raises(EvaluationError):
        identification_report(np.zeros((1, 2)), ["z"], ["a", "b"])
    with pytest.raises(ValueError):
        LinkabilityReport(1.5, 0.0, 1, 1)
    with pytest.raises(ValueError):
        AdversaryScenario(kind="sneaky")


def test_session_noise_reproducible_and_distinct():
    a = session_noise(0, "u1", "session1")
    np.testing.assert_array_equal(a, session_noise(0, "u1", "session1"))
    assert not np.allclose(a, session_noise(0, "u1", "session2"))
    assert not np.allclose(a, session_noise(0, "u2", "session1"))


def test_check_sessions(small_corpus):
    s = split_sessions(small_corpus.manifest, users=3, per_session=3, seed=0)
    check_sessions(s)
    with pytest.raises(EvaluationError):
        check_sessions(small_corpus.manifest)
    entries = list(s.entries)
    keys = [e.meta.key for e in entries]
    s1 = [k for k in keys if s.splits[k] == "session1"]
    s2 = [k for k in keys if s.splits[k] == "session2"]
    from dataclasses import replace
    leaky = [replace(e, path="same.jsonl") if e.meta.key in (s1[0], s2[0]) else e for e in entries]
    with pytest.raises(LeakageError):
        check_sessions(Manifest(leaky, s.splits))


def test_tabular_scenarios(small_corpus, small_windows, tiny_bundle):
    s = split_sessions(small_corpus.manifest, users=4, per_session=3, seed=0)
    reports = run_table(s, small_windows, tiny_bundle, identifiers=("summary_stats_tabular",))
    assert len(reports) == 4
    clean = reports[0]
    assert clean.scenario == {"kind": "oblivious", "defense": "none", "identifier": "summary_stats_tabular"}
    assert clean.n_users == 4 and clean.n_samples == 12
    assert clean.per_sample_accuracy >= 0.75
    with pytest.raises(EvaluationError):
        run_scenario(AdversaryScenario(), s, small_windows, None)


def test_tabular_identifier_probabilities(small_corpus, small_windows):
    keys = small_corpus.manifest.keys
    x = np.stack([small_windows[k] for k in keys])
    model = TabularIdentifier.fit(x, [k[0] for k in keys], seed=0)
    lp = model.log_proba(x[:3])
    np.testing.assert_allclose(np.exp(lp).sum(1), 1.0, atol=1e-12)


def test_report_files(tmp_path):
    r1 = LinkabilityReport(0.9, 1.0, 20, 4, {}, {"kind": "oblivious", "defense": "none", "identifier": "lstm_funnel"})
    r2 = LinkabilityReport(0.05, 0.0, 20, 4, {},
                           {"kind": "adaptive", "defense": "deep_motion_masking", "identifier": "lstm_funnel"})
    jp, mp = emit_report([r2, r1], tmp_path, {"cohort": {"users": 4}})
    doc = json.loads(jp.read_text())
    assert [r["scenario"]["defense"] for r in doc["reports"]] == ["none", "deep_motion_masking"]
    md = mp.read_text()
    assert "| Unmodified | 90.0% / 100.0% | n/a |" in md
    assert "| Deep motion masking | n/a | 5.0% / 0.0% |" in md
    assert [r.per_sample_accuracy for r in load_report(jp)] == [0.9, 0.05]
    assert render_markdown([]).startswith("# Identification")
    emit_report([r2, r1], tmp_path / "again", {"cohort": {"users": 4}})
    assert (tmp_path / "again" / "report.json").read_bytes() == jp.read_bytes()


def test_trajectory_deviation_known_offsets():
    rng = np.random.default_rng(2)
    data = random_frames(rng, 20)
    seq = MotionSequence(np.arange(20) / 30.0, data)
    zero = trajectory_deviation(seq, seq)
    assert zero["left"]["position_cm"]["max"] == 0.0 and zero["left"]["rotation_deg"]["max"] == 0.0
    moved = data.copy()
    moved[:, 7] += 0.01  # 1 cm on the left hand
    rot = quat_from_rotvec(np.array([0, 0, np.radians(10)]))
    from scipy.spatial.transform import Rotation
    moved[:, 17:21] = (Rotation.from_quat(data[:, 17:21]) * Rotation.from_quat(rot)).as_quat()
    dev = trajectory_deviation(seq, MotionSequence(seq.t, moved))
    assert dev["left"]["position_cm"]["mean"] == pytest.approx(1.0)
    assert dev["right"]["rotation_deg"]["p50"] == pytest.approx(10.0, abs=1e-6)
    assert dev["head"]["position_cm"]["max"] == 0.0
