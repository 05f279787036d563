"""Training procedures for the identifier, the two similarity models, the
anonymizer (pretraining and adversarial stage) and the normalizer."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import FULL, QUATERNION_BLOCKS, DimensionStats, FeatureSubset, STD_FLOOR, zscore_fit
from .dataset import AnonTrainSample, Key, Manifest, PairSample
from .models import (
    AnonymizerConfig,
    Anonymizer,
    EncoderConfig,
    Identifier,
    IdentifierModel,
    Normalizer,
    NormalizerConfig,
    SimilarityModel,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigurationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 500
    patience: int = 25
    batch_size: int = 32
    alpha_action: float = 1.0
    beta_user: float = 1.0
    seed: int = 0
    plateau_patience: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-5
    pretrain_epochs: int = 20
    early_stopping: bool = True
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.alpha_action < 0 or self.beta_user < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class TrainReport:
    name: str
    epochs: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        m = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.metrics.items())
        return f"{self.name}: {self.stopped_epoch} epochs (best {self.best_epoch}), {self.wall_clock:.1f}s; {m}"


@dataclass(frozen=True)
class PopulationShift:
    """Per-dimension affine map taking ``source`` population stats onto ``target``."""

    source: DimensionStats
    target: DimensionStats

    @classmethod
    def identity(cls, n: int = 21) -> "PopulationShift":
        return cls(DimensionStats.identity(n), DimensionStats.identity(n))

    @property
    def scale(self) -> np.ndarray:
        return self.target.std / self.source.std

    @property
    def offset(self) -> np.ndarray:
        return self.target.mean - self.source.mean * self.scale

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.source.mean) / self.source.std * self.target.std + self.target.mean


def seed_everything(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _zs(windows: np.ndarray, stats: DimensionStats) -> torch.Tensor:
    x = (np.asarray(windows, dtype=np.float64) - stats.mean) / stats.std
    return torch.from_numpy(x.astype(np.float32))


def project_unit_quaternions(z: torch.Tensor, stats: DimensionStats | None) -> torch.Tensor:
    """Differentiable z-space copy of the runtime's final quaternion renormalization.

    Losses see the output the runtime will actually emit. ``stats=None`` is a no-op.
    """
    if stats is None:
        return z
    mean = torch.as_tensor(stats.mean, dtype=z.dtype)
    std = torch.as_tensor(stats.std, dtype=z.dtype)
    raw = z * std + mean
    cols = [raw[..., c] for c in range(raw.shape[-1])]
    for block in QUATERNION_BLOCKS:
        q = torch.stack([cols[c] for c in block], dim=-1)
        q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-6)
        for i, c in enumerate(block):
            cols[c] = q[..., i]
    return (torch.stack(cols, dim=-1) - mean) / std


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _fit(name: str, model: nn.Module, params, step: Callable[[np.ndarray], torch.Tensor], n_train: int,
         validate: Callable[[], float] | None, cfg: TrainConfig, epochs: int | None = None,
         on_epoch: Callable[[int], dict] | None = None) -> TrainReport:
    """Shared loop: Adam, halve-on-plateau schedule, early stopping on a maximized metric."""
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=cfg.lr_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr)
    report = TrainReport(name)
    best, best_state, since = -np.inf, None, 0
    t0 = time.perf_counter()
    max_epochs = epochs or cfg.max_epochs
    for epoch in range(1, max_epochs + 1):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(n_train, cfg.batch_size, rng):
            loss = step(idx)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        model.eval()
        row = {"epoch": epoch, "loss": total / max(count, 1), "lr": opt.param_groups[0]["lr"]}
        if validate is not None:
            metric = float(validate())
            row["val"] = metric
            sched.step(metric)
            if metric > best:
                best, since = metric, 0
                best_state = copy.deepcopy(model.state_dict())
                report.best_epoch = epoch
            else:
                since += 1
        else:
            report.best_epoch = epoch
        if on_epoch is not None:
            row.update(on_epoch(epoch))
        report.epochs.append(row)
        log.info("%s epoch %d: %s", name, epoch, row)
        report.stopped_epoch = epoch
        if validate is not None and cfg.early_stopping and since >= cfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    report.wall_clock = time.perf_counter() - t0
    return report


# --- identifier ------------------------------------------------------------

def train_identifier(manifest: Manifest, windows: Mapping[Key, np.ndarray], cfg: TrainConfig,
                     enc_cfg: EncoderConfig = EncoderConfig(), subset: FeatureSubset = FULL,
                     splits=("train", "val", "test")) -> tuple[IdentifierModel, TrainReport]:
    """Softmax identification over the users of ``manifest``'s training split.

    Early stopping monitors validation per-sample accuracy. Input statistics
    are fit on the training windows only.
    """
    tr, va, te = (manifest.subset(s) for s in splits)
    classes = sorted({e.meta.user_id for e in tr.entries})
    if len(classes) < 2:
        raise TrainingError("identification needs at least two users")
    if len(va) == 0:
        raise TrainingError("identification needs a validation split")
    index = {u: i for i, u in enumerate(classes)}

    def arrays(m: Manifest):
        keys = [e.meta.key for e in m.entries if e.meta.user_id in index]
        x = np.stack([windows[k] for k in keys]) if keys else np.zeros((0, 900, 21))
        return x, np.array([index[k[0]] for k in keys], dtype=np.int64)

    (xtr, ytr), (xva, yva), (xte, yte) = arrays(tr), arrays(va), arrays(te)
    stats = zscore_fit(xtr)
    cols = list(subset.columns)
    seed_everything(cfg.seed)
    net = Identifier(len(classes), enc_cfg, n_inputs=len(cols))
    ttr = _zs(xtr, stats)[..., cols]
    tva = _zs(xva, stats)[..., cols]
    ytr_t = torch.from_numpy(ytr)

    def step(idx):
        return F.cross_entropy(net(ttr[idx]), ytr_t[idx])

    def accuracy(x, y):
        with torch.no_grad():
            pred = torch.cat([net(x[i:i + 64]).argmax(-1) for i in range(0, len(x), 64)])
        return float((pred.numpy() == y).mean())

    report = _fit(f"identifier[{subset.name}]", net, net.parameters(), step, len(ttr),
                  lambda: accuracy(tva, yva), cfg)
    report.metrics["train_accuracy"] = accuracy(ttr, ytr)
    report.metrics["val_accuracy"] = accuracy(tva, yva)
    if len(xte):
        report.metrics["test_accuracy"] = accuracy(_zs(xte, stats)[..., cols], yte)
    return IdentifierModel(net, stats, classes, subset), report


# --- similarity models -----------------------------------------------------

def _pair_arrays(pairs: Sequence[PairSample], stats: DimensionStats):
    a = _zs(np.stack([p.window_a for p in pairs]), stats)
    b = _zs(np.stack([p.window_b for p in pairs]), stats)
    y = torch.tensor([float(p.label) for p in pairs])
    return a, b, y


def pair_accuracy(model: SimilarityModel, a: torch.Tensor, b: torch.Tensor, y: torch.Tensor,
                  batch: int = 32) -> float:
    with torch.no_grad():
        logits = torch.cat([model(a[i:i + batch], b[i:i + batch]) for i in range(0, len(a), batch)])
    return float(((logits > 0).float() == y).float().mean())


def _train_similarity(name: str, train: Sequence[PairSample], val: Sequence[PairSample],
                      test: Sequence[PairSample], stats: DimensionStats, cfg: TrainConfig,
                      enc_cfg: EncoderConfig) -> tuple[SimilarityModel, TrainReport]:
    if not train:
        raise TrainingError(f"{name}: no training pairs")
    labels = np.array([p.label for p in train])
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise TrainingError(f"{name}: training pairs contain only one class")
    if max(n_pos, n_neg) > 10 * min(n_pos, n_neg):
        log.warning("%s: label imbalance %d:%d exceeds 10:1", name, n_pos, n_neg)
    seed_everything(cfg.seed)
    model = SimilarityModel(enc_cfg)
    a, b, y = _pair_arrays(train, stats)

    def step(idx):
        return F.binary_cross_entropy_with_logits(model(a[idx], b[idx]), y[idx])

    validate = None
    if val:
        va, vb, vy = _pair_arrays(val, stats)
        validate = lambda: pair_accuracy(model, va, vb, vy)  # noqa: E731
    report = _fit(name, model, model.parameters(), step, len(a), validate, cfg)
    report.metrics["train_accuracy"] = pair_accuracy(model, a, b, y)
    if val:
        report.metrics["val_accuracy"] = pair_accuracy(model, va, vb, vy)
    if test:
        report.metrics["test_accuracy"] = pair_accuracy(model, *_pair_arrays(test, stats))
    return model, report


def train_action_similarity(train: Sequence[PairSample], val: Sequence[PairSample], stats: DimensionStats,
                            cfg: TrainConfig, enc_cfg: EncoderConfig = EncoderConfig(),
                            test: Sequence[PairSample] = ()) -> tuple[SimilarityModel, TrainReport]:
    """Binary same-activity scorer over cross-user pairs."""
    return _train_similarity("action_similarity", train, val, test, stats, cfg, enc_cfg)


def train_user_similarity(train: Sequence[PairSample], val: Sequence[PairSample], stats: DimensionStats,
                          cfg: TrainConfig, enc_cfg: EncoderConfig = EncoderConfig(),
                          test: Sequence[PairSample] = ()) -> tuple[SimilarityModel, TrainReport]:
    """Binary same-user scorer over cross-activity pairs."""
    return _train_similarity("user_similarity", train, val, test, stats, cfg, enc_cfg)


# --- anonymizer --------------------------------------------------------------

def pretrain_anonymizer(windows: np.ndarray, stats: DimensionStats, cfg: TrainConfig,
                        anon_cfg: AnonymizerConfig = AnonymizerConfig(),
                        model: Anonymizer | None = None) -> tuple[Anonymizer, TrainReport]:
    """Autoencoder pretraining: reproduce the input whatever noise is supplied."""
    seed_everything(cfg.seed)
    model = model or Anonymizer(anon_cfg)
    x = _zs(windows, stats)
    gen = torch.Generator().manual_seed(cfg.seed)

    def step(idx):
        noise = torch.randn(len(idx), model.cfg.noise_dim, generator=gen)
        return F.mse_loss(project_unit_quaternions(model(x[idx], noise), stats), x[idx])

    report = _fit("anonymizer_pretrain", model, model.parameters(), step, len(x), None, cfg,
                  epochs=cfg.pretrain_epochs)
    with torch.no_grad():
        noise = torch.randn(len(x), model.cfg.noise_dim, generator=gen)
        report.metrics["reconstruction_mse"] = float(F.mse_loss(project_unit_quaternions(model(x, noise), stats), x))
    return model, report


def _check_frozen(*models: nn.Module) -> None:
    for m in models:
        if m.training or any(p.requires_grad for p in m.parameters()):
            raise ConfigurationError("similarity models must be frozen (eval mode, requires_grad=False)")


def _anon_arrays(samples: Sequence[AnonTrainSample], stats: DimensionStats):
    a = _zs(np.stack([s.window_a for s in samples]), stats)
    b = _zs(np.stack([s.window_b for s in samples]), stats)
    na = torch.from_numpy(np.stack([s.noise_a for s in samples]).astype(np.float32))
    nb = torch.from_numpy(np.stack([s.noise_b for s in samples]).astype(np.float32))
    eq = torch.tensor([float(s.noise_equal) for s in samples])
    return a, b, na, nb, eq


def _embed(encoder: nn.Module, x: torch.Tensor, batch: int = 64) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([encoder(x[i:i + batch]) for i in range(0, len(x), batch)])


def anonymizer_loss(anon: Anonymizer, action_sim: SimilarityModel, user_sim: SimilarityModel,
                    a, b, na, nb, eq, ea_in, eb_in, alpha: float, beta: float,
                    stats: DimensionStats | None = None):
    """Weighted sum of the action-preservation and noise-identity terms.

    Returns the loss and the per-pair action logits and user logit. With
    ``stats`` the output is scored after quaternion renormalization.
    """
    out = project_unit_quaternions(anon(torch.cat([a, b]), torch.cat([na, nb])), stats)
    n = len(a)
    act_emb = action_sim.encoder(out)
    act_a = action_sim.head_logit(ea_in, act_emb[:n])
    act_b = action_sim.head_logit(eb_in, act_emb[n:])
    usr_emb = user_sim.encoder(out)
    usr = user_sim.head_logit(usr_emb[:n], usr_emb[n:])
    ones = torch.ones_like(act_a)
    loss = alpha * (F.binary_cross_entropy_with_logits(act_a, ones)
                    + F.binary_cross_entropy_with_logits(act_b, ones))
    loss = loss + beta * F.binary_cross_entropy_with_logits(usr, eq)
    return loss, act_a, act_b, usr


def evaluate_anonymizer(anon: Anonymizer, action_sim: SimilarityModel, user_sim: SimilarityModel,
                        samples: Sequence[AnonTrainSample], stats: DimensionStats, batch: int = 16) -> dict:
    """Action-preservation rate and user-scorer agreement with the noise flag."""
    a, b, na, nb, eq = _anon_arrays(samples, stats)
    act_ok, usr_ok = [], []
    with torch.no_grad():
        for i in range(0, len(a), batch):
            s = slice(i, i + batch)
            ea, eb = _embed(action_sim.encoder, a[s]), _embed(action_sim.encoder, b[s])
            _, act_a, act_b, usr = anonymizer_loss(anon, action_sim, user_sim, a[s], b[s], na[s], nb[s],
                                                   eq[s], ea, eb, 1.0, 1.0, stats)
            act_ok += [(act_a > 0).numpy(), (act_b > 0).numpy()]
            usr_ok.append(((usr > 0).float() == eq[s]).numpy())
    return {"action_preserved": float(np.concatenate(act_ok).mean()),
            "user_noise_agreement": float(np.concatenate(usr_ok).mean())}


def train_anonymizer(samples: Sequence[AnonTrainSample], action_sim: SimilarityModel,
                     user_sim: SimilarityModel, anon: Anonymizer, stats: DimensionStats,
                     cfg: TrainConfig, test: Sequence[AnonTrainSample] = (),
                     epochs: int | None = None) -> tuple[Anonymizer, TrainReport]:
    """Adversarial stage against frozen similarity scorers; runs every epoch, no early stop."""
    _check_frozen(action_sim, user_sim)
    if not samples:
        raise TrainingError("no anonymizer training samples")
    seed_everything(cfg.seed)
    a, b, na, nb, eq = _anon_arrays(samples, stats)
    ea_in, eb_in = _embed(action_sim.encoder, a), _embed(action_sim.encoder, b)

    def step(idx):
        loss, *_ = anonymizer_loss(anon, action_sim, user_sim, a[idx], b[idx], na[idx], nb[idx], eq[idx],
                                   ea_in[idx], eb_in[idx], cfg.alpha_action, cfg.beta_user, stats)
        return loss

    report = _fit("anonymizer", anon, anon.parameters(), step, len(a), None, cfg,
                  epochs=epochs or cfg.max_epochs)
    if test:
        report.metrics.update({f"test_{k}": v for k, v in
                               evaluate_anonymizer(anon, action_sim, user_sim, test, stats).items()})
    return anon, report


# --- normalizer and population statistics ------------------------------------

def fit_population_shift(original, anonymized) -> PopulationShift:
    """Affine per-dimension map aligning anonymized population stats with the original ones."""
    original = [np.asarray(w) for w in original]
    anonymized = [np.asarray(w) for w in anonymized]
    if not original or not anonymized:
        raise ValueError("both corpora must be non-empty")
    src, dst = zscore_fit(anonymized), zscore_fit(original)
    if np.any(src.std <= STD_FLOOR) or np.any(dst.std <= STD_FLOOR):
        log.warning("population shift: degenerate dimension std clamped to %g", STD_FLOOR)
    return PopulationShift(src, dst)


def train_normalizer(inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                     norm_cfg: NormalizerConfig = NormalizerConfig(), val_fraction: float = 0.1,
                     test: tuple[np.ndarray, np.ndarray] | None = None,
                     stats: DimensionStats | None = None) -> tuple[Normalizer, TrainReport]:
    """Regress original z-scored windows from anonymized z-scored windows (no noise input).

    ``stats`` makes the loss and metrics see quaternion-renormalized output.
    """
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
    y = torch.as_tensor(np.asarray(targets, dtype=np.float32))
    if x.shape != y.shape or x.ndim != 3:
        raise TrainingError("inputs and targets must be matching (n, frames, dims) arrays")
    seed_everything(cfg.seed)
    n_val = max(1, int(round(len(x) * val_fraction))) if len(x) > 1 else 0
    perm = np.random.default_rng(cfg.seed).permutation(len(x))
    vi, ti = perm[:n_val], perm[n_val:]
    model = Normalizer(norm_cfg)

    def mse(xx, yy):
        return float(np.mean((normalize_batches(model, xx, stats=stats) - yy.numpy()) ** 2))

    def step(idx):
        idx = ti[idx]
        return F.mse_loss(project_unit_quaternions(model(x[idx]), stats), y[idx])

    validate = (lambda: -mse(x[vi], y[vi])) if n_val else None
    report = _fit("normalizer", model, model.parameters(), step, len(ti), validate, cfg)
    if test is not None:
        tx = torch.as_tensor(np.asarray(test[0], dtype=np.float32))
        ty = torch.as_tensor(np.asarray(test[1], dtype=np.float32))
        before = float(F.mse_loss(project_unit_quaternions(tx, stats), ty))
        after = float(np.mean((normalize_batches(model, tx, stats=stats) - ty.numpy()) ** 2))
        report.metrics.update({"test_mse_before": before, "test_mse_after": after,
                               "improvement_factor": before / after})
    return model, report


def normalize_batches(model: Normalizer, x: torch.Tensor, batch: int = 32,
                      stats: DimensionStats | None = None) -> np.ndarray:
    with torch.no_grad():
        return torch.cat([project_unit_quaternions(model(x[i:i + batch]), stats)
                          for i in range(0, len(x), batch)]).numpy()
