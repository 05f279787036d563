"""Stage-by-stage training of the anonymization bundle.

Stages run in dependency order: statistics, action similarity, user
similarity, anonymizer (pretrain then adversarial), normalizer (after fitting
the population shift on anonymized training windows). Each stage reads and
extends a :class:`ModelBundle`, so a failed stage can be re-run on its own.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch

from .bundle import ModelBundle
from .core import zscore_fit
from .dataset import (
    Key,
    Manifest,
    prepare_windows,
    sample_action_pairs,
    sample_anonymizer_pairs,
    sample_user_pairs,
    split_recordings,
    split_sessions,
)
from .models import ArchitectureConfig
from .synth import synth_generate
from .training import (
    ConfigurationError,
    PopulationShift,
    TrainConfig,
    TrainReport,
    evaluate_anonymizer,
    fit_population_shift,
    freeze,
    pretrain_anonymizer,
    train_action_similarity,
    train_anonymizer,
    train_normalizer,
    train_user_similarity,
)

log = logging.getLogger(__name__)

STAGES = ("action-sim", "user-sim", "anonymizer", "normalizer")


@dataclass
class DefenseConfig:
    """Sample counts and epoch budgets for one defense training run.

    Defaults follow the full protocol (500-epoch caps, patience 25). Use
    :meth:`desk` for the reduced budget that fits a single CPU.
    """

    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    pairs_per_class: int = 400
    val_pairs_per_class: int = 50
    test_pairs_per_class: int = 50
    anon_pairs: int = 400
    anon_test_pairs: int = 100
    normalizer_noise_draws: int = 2
    sim_epochs: int = 500
    sim_patience: int = 25
    pretrain_epochs: int = 20
    anon_epochs: int = 500
    anon_batch_size: int = 16
    normalizer_epochs: int = 500
    normalizer_patience: int = 25
    alpha_action: float = 1.0
    beta_user: float = 1.0
    lr: float = 1e-3
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "DefenseConfig":
        budget = dict(sim_epochs=30, sim_patience=8, anon_epochs=30, normalizer_epochs=40, normalizer_patience=8)
        budget.update(overrides)
        return cls(**budget)

    def train_config(self, stage: str) -> TrainConfig:
        base = dict(lr=self.lr, seed=self.seed, alpha_action=self.alpha_action, beta_user=self.beta_user,
                    pretrain_epochs=self.pretrain_epochs)
        if stage in ("action-sim", "user-sim"):
            return TrainConfig(max_epochs=self.sim_epochs, patience=self.sim_patience, **base)
        if stage == "anonymizer":
            return TrainConfig(max_epochs=self.anon_epochs, batch_size=self.anon_batch_size,
                               early_stopping=False, **base)
        if stage == "normalizer":
            return TrainConfig(max_epochs=self.normalizer_epochs, patience=self.normalizer_patience, **base)
        raise ValueError(f"unknown stage {stage!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d


def _windows(manifest: Manifest, windows: Mapping[Key, np.ndarray], split: str | tuple[str, ...]):
    splits = (split,) if isinstance(split, str) else split
    keys = [e.meta.key for e in manifest.entries if manifest.splits.get(e.meta.key) in splits]
    return np.stack([windows[k] for k in keys])


def _held_out(manifest: Manifest) -> Manifest:
    keep = {k for k, v in manifest.splits.items() if v in ("val", "test")}
    return Manifest([e for e in manifest.entries if e.meta.key in keep])


def stage_stats(bundle: ModelBundle, manifest: Manifest, windows) -> None:
    if bundle.input_stats is None:
        bundle.input_stats = zscore_fit(_windows(manifest, windows, "train"))


def stage_similarity(bundle: ModelBundle, which: str, manifest: Manifest, windows, dcfg: DefenseConfig) -> TrainReport:
    stage_stats(bundle, manifest, windows)
    sampler = sample_action_pairs if which == "action-sim" else sample_user_pairs
    trainer = train_action_similarity if which == "action-sim" else train_user_similarity
    seed = dcfg.seed + (0 if which == "action-sim" else 1000)
    tr = sampler(manifest.subset("train"), windows, dcfg.pairs_per_class, dcfg.pairs_per_class, seed)
    va = sampler(manifest.subset("val"), windows, dcfg.val_pairs_per_class, dcfg.val_pairs_per_class, seed + 1)
    te = sampler(manifest.subset("test"), windows, dcfg.test_pairs_per_class, dcfg.test_pairs_per_class, seed + 2)
    model, report = trainer(tr, va, bundle.input_stats, dcfg.train_config(which), dcfg.arch.encoder, te)
    setattr(bundle, "action_sim" if which == "action-sim" else "user_sim", model.eval())
    log.info(report.summary())
    return report


def stage_anonymizer(bundle: ModelBundle, manifest: Manifest, windows, dcfg: DefenseConfig) -> list[TrainReport]:
    if bundle.action_sim is None or bundle.user_sim is None:
        raise ConfigurationError("anonymizer training needs trained similarity models; "
                                 "run `train action-sim` and `train user-sim` first")
    stage_stats(bundle, manifest, windows)
    cfg = dcfg.train_config("anonymizer")
    anon, pre = pretrain_anonymizer(_windows(manifest, windows, "train"), bundle.input_stats, cfg,
                                    dcfg.arch.anonymizer)
    freeze(bundle.action_sim)
    freeze(bundle.user_sim)
    samples = sample_anonymizer_pairs(manifest.subset("train"), windows, dcfg.anon_pairs,
                                      noise_dim=dcfg.arch.anonymizer.noise_dim, seed=dcfg.seed + 2000)
    test = sample_anonymizer_pairs(_held_out(manifest), windows, dcfg.anon_test_pairs,
                                   noise_dim=dcfg.arch.anonymizer.noise_dim, seed=dcfg.seed + 2001)
    if test:
        pre.metrics.update({f"test_{k}": v for k, v in
                            evaluate_anonymizer(anon, bundle.action_sim, bundle.user_sim, test,
                                                bundle.input_stats).items()})
    anon, report = train_anonymizer(samples, bundle.action_sim, bundle.user_sim, anon, bundle.input_stats, cfg, test)
    bundle.anonymizer = anon.eval()
    bundle.shift = None
    bundle.normalizer = None
    log.info(pre.summary())
    log.info(report.summary())
    return [pre, report]


def anonymize_z(bundle: ModelBundle, windows: np.ndarray, noise: np.ndarray, batch: int = 32):
    """Anonymizer output and z-scored input for raw ``(n, frames, 21)`` windows."""
    s = bundle.input_stats
    z = ((np.asarray(windows, dtype=np.float64) - s.mean) / s.std).astype(np.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(z), batch):
            out.append(bundle.anonymizer(torch.from_numpy(z[i:i + batch]),
                                         torch.as_tensor(noise[i:i + batch], dtype=torch.float32)).numpy())
    return np.concatenate(out), z


def stage_normalizer(bundle: ModelBundle, manifest: Manifest, windows, dcfg: DefenseConfig) -> TrainReport:
    if bundle.anonymizer is None:
        raise ConfigurationError("normalizer training needs a trained anonymizer; run `train anonymizer` first")
    stage_stats(bundle, manifest, windows)
    rng = np.random.default_rng(dcfg.seed + 3000)
    dim = dcfg.arch.anonymizer.noise_dim
    train = np.concatenate([_windows(manifest, windows, "train")] * dcfg.normalizer_noise_draws)
    anon, orig = anonymize_z(bundle, train, rng.standard_normal((len(train), dim)))
    shift = fit_population_shift(list(orig), list(anon))
    held = _windows(manifest, windows, ("val", "test"))
    t_anon, t_orig = anonymize_z(bundle, held, rng.standard_normal((len(held), dim)))
    t_shifted = shift.apply(t_anon)
    model, report = train_normalizer(shift.apply(anon), orig, dcfg.train_config("normalizer"), dcfg.arch.normalizer,
                                     test=(t_shifted, t_orig), stats=bundle.input_stats)
    raw_mse = float(np.mean((t_anon - t_orig) ** 2))
    report.metrics["test_mse_anonymizer_output"] = raw_mse
    report.metrics["improvement_vs_anonymizer_output"] = raw_mse / report.metrics["test_mse_after"]
    bundle.shift = shift
    bundle.normalizer = model.eval()
    log.info(report.summary())
    return report


def train_defense(manifest: Manifest, windows: Mapping[Key, np.ndarray], dcfg: DefenseConfig,
                  bundle: ModelBundle | None = None) -> tuple[ModelBundle, dict[str, TrainReport]]:
    """Run every stage on a manifest carrying train/val/test labels."""
    bundle = bundle or ModelBundle(dcfg.arch)
    reports = {}
    reports["action_similarity"] = stage_similarity(bundle, "action-sim", manifest, windows, dcfg)
    reports["user_similarity"] = stage_similarity(bundle, "user-sim", manifest, windows, dcfg)
    pre, adv = stage_anonymizer(bundle, manifest, windows, dcfg)
    reports["anonymizer_pretrain"], reports["anonymizer"] = pre, adv
    reports["normalizer"] = stage_normalizer(bundle, manifest, windows, dcfg)
    bundle.meta["defense_config"] = dcfg.to_dict()
    bundle.meta["train_users"] = sorted(manifest.users)
    bundle.meta["reports"] = {k: {"metrics": r.metrics, "stopped_epoch": r.stopped_epoch} for k, r in reports.items()}
    return bundle, reports


@dataclass
class DeskCohorts:
    """Two disjoint synthetic user cohorts drawn from one generator run.

    ``defense`` carries train/val/test labels for the defense models;
    ``attack`` carries session1/session2 labels for re-identification.
    """

    defense: Manifest
    attack: Manifest
    windows: dict


def desk_cohorts(users: int = 20, activities: int = 10, recordings: int = 20, per_session: int = 10,
                 fractions=(0.7, 0.15, 0.15), seed: int = 0) -> DeskCohorts:
    corpus = synth_generate(2 * users, activities, recordings, seed=seed)
    windows = prepare_windows(corpus.manifest, corpus.sequences)
    names = corpus.manifest.users
    defense = split_recordings(corpus.manifest.subset(users=names[:users]), fractions, seed=seed)
    attack = split_sessions(corpus.manifest.subset(users=names[users:]), users, per_session, seed=seed)
    return DeskCohorts(defense, attack, windows)


__all__ = ["DeskCohorts", "desk_cohorts", "DefenseConfig", "STAGES", "PopulationShift", "anonymize_z", "stage_anonymizer", "stage_normalizer",
           "stage_similarity", "stage_stats", "train_defense"]
