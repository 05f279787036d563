"""Network definitions and numpy-facing inference helpers.

All networks take z-scored ``(batch, frames, 21)`` float32 tensors. The
encoder is an LSTM funnel: a per-frame LSTM, average pooling over one-second
chunks, and a second LSTM whose final hidden state is the embedding.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .core import N_DIMS, WINDOW_FRAMES, DimensionStats, FeatureSubset, FULL, InvalidInputError

NOISE_DIM = 32


@dataclass(frozen=True)
class EncoderConfig:
    n_inputs: int = N_DIMS
    frame_state_dim: int = 256
    chunk_len: int = 30
    summary_dim: int = 256
    embedding_dim: int = 256
    hidden_dense_dims: tuple[int, ...] = (256,)
    window_frames: int = WINDOW_FRAMES

    def __post_init__(self):
        object.__setattr__(self, "hidden_dense_dims", tuple(self.hidden_dense_dims))
        if self.window_frames % self.chunk_len:
            raise InvalidInputError("window length must be divisible by chunk_len")
        if self.summary_dim != self.frame_state_dim:
            raise InvalidInputError("average pooling keeps the frame state width; summary_dim must equal it")


@dataclass(frozen=True)
class AnonymizerConfig:
    n_inputs: int = N_DIMS
    noise_dim: int = NOISE_DIM
    conv_filters: int = 64
    kernel: int = 31
    hidden_dims: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @property
    def hybrid_dim(self) -> int:
        return self.n_inputs + self.noise_dim + self.conv_filters


@dataclass(frozen=True)
class NormalizerConfig:
    n_inputs: int = N_DIMS
    state_dim: int = 256


@dataclass(frozen=True)
class ArchitectureConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    anonymizer: AnonymizerConfig = field(default_factory=AnonymizerConfig)
    normalizer: NormalizerConfig = field(default_factory=NormalizerConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lstm_cell"] = "torch.nn.LSTM gates (input, forget, cell, output), zero initial state"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(EncoderConfig(**d["encoder"]), AnonymizerConfig(**d["anonymizer"]),
                   NormalizerConfig(**d["normalizer"]))


class FunnelEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig(), n_inputs: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.frame_lstm = nn.LSTM(n_inputs or cfg.n_inputs, cfg.frame_state_dim, batch_first=True)
        self.summary_lstm = nn.LSTM(cfg.summary_dim, cfg.embedding_dim, batch_first=True)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        h, _ = self.frame_lstm(x)
        return self.pool(h)

    def pool(self, h: torch.Tensor) -> torch.Tensor:
        b, n, d = h.shape
        if n % self.cfg.chunk_len:
            raise InvalidInputError(f"{n} frames is not a whole number of {self.cfg.chunk_len}-frame chunks")
        return h.reshape(b, n // self.cfg.chunk_len, self.cfg.chunk_len, d).mean(dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.summary_lstm(self.pooled(x))
        return h[-1]


class Identifier(nn.Module):
    def __init__(self, n_classes: int, cfg: EncoderConfig = EncoderConfig(), n_inputs: int | None = None):
        super().__init__()
        self.encoder = FunnelEncoder(cfg, n_inputs)
        layers, width = [], cfg.embedding_dim
        for h in cfg.hidden_dense_dims:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, n_classes))
        self.head = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


class SimilarityModel(nn.Module):
    """Siamese scorer ``sigmoid(bias - scale * ||enc(a) - enc(b)||)`` with one shared encoder."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.encoder = FunnelEncoder(cfg)
        self.log_scale = nn.Parameter(torch.tensor(0.0))
        self.bias = nn.Parameter(torch.tensor(2.0))

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def head_logit(self, ea: torch.Tensor, eb: torch.Tensor) -> torch.Tensor:
        d2 = ((ea - eb) ** 2).sum(dim=-1)
        dist = torch.sqrt(d2 + 1e-12)
        return self.bias - self.scale * dist

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Logits; both limbs go through one batched encoder call."""
        e = self.encoder(torch.cat([a, b]))
        ea, eb = e[: len(a)], e[len(a):]
        return self.head_logit(ea, eb)


class Anonymizer(nn.Module):
    """Causal conv over frames N-30..N, concatenated with the frame and the noise,
    then a per-frame dense stack back to 21 columns."""

    def __init__(self, cfg: AnonymizerConfig = AnonymizerConfig()):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(cfg.n_inputs, cfg.conv_filters, cfg.kernel)
        layers, width = [], cfg.hybrid_dim
        for h in cfg.hidden_dims:
            layers += [nn.Linear(width, h), nn.Tanh()]
            width = h
        layers.append(nn.Linear(width, cfg.n_inputs))
        self.dense = nn.Sequential(*layers)

    def hybrid(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        # left padding with copies of the first frame (the warm-up buffer)
        pad = x[:, :1].expand(-1, self.cfg.kernel - 1, -1)
        conv = self.conv(torch.cat([pad, x], dim=1).transpose(1, 2)).transpose(1, 2)
        noise = noise[:, None, :].expand(-1, x.shape[1], -1)
        return torch.cat([x, noise, conv], dim=-1)

    def forward(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return self.dense(self.hybrid(x, noise))


class Normalizer(nn.Module):
    def __init__(self, cfg: NormalizerConfig = NormalizerConfig()):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.n_inputs, cfg.state_dim, batch_first=True)
        self.out = nn.Linear(cfg.state_dim, cfg.n_inputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, _ = self.lstm(x)
        return self.out(h)


@dataclass
class IdentifierModel:
    """A trained identification network with its own input statistics and class list."""

    net: Identifier
    stats: DimensionStats
    classes: list[str]
    subset: FeatureSubset = FULL

    def log_proba(self, windows, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[-1] != N_DIMS:
            raise InvalidInputError("identifier expects 21-column windows")
        x = (x - self.stats.mean) / self.stats.std
        x = x[..., list(self.subset.columns)]
        out = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                logits = self.net(torch.as_tensor(x[i:i + batch_size], dtype=torch.float32))
                out.append(torch.log_softmax(logits.double(), dim=-1).numpy())
        return np.concatenate(out)


def _as_batch(w, name: str = "window") -> torch.Tensor:
    a = np.asarray(w, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[-1] != N_DIMS:
        raise InvalidInputError(f"{name} must be (frames, {N_DIMS}) or a batch of those, got {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a))


def encode(w, encoder: FunnelEncoder) -> np.ndarray:
    """Embedding(s) of z-scored window(s)."""
    x = _as_batch(w)
    if x.shape[1] % encoder.cfg.chunk_len:
        raise InvalidInputError("window length must be a multiple of the chunk length")
    with torch.no_grad():
        e = encoder(x).numpy()
    return e[0] if np.ndim(w) == 2 else e


def classify(w, model: Identifier) -> np.ndarray:
    """Class probabilities for z-scored window(s)."""
    x = _as_batch(w)
    with torch.no_grad():
        p = torch.softmax(model(x).double(), dim=-1).numpy()
    return p[0] if np.ndim(w) == 2 else p


def similarity(w_a, w_b, model: SimilarityModel) -> np.ndarray | float:
    a, b = _as_batch(w_a), _as_batch(w_b)
    if a.shape != b.shape:
        raise InvalidInputError("window shapes differ")
    with torch.no_grad():
        s = torch.sigmoid(model(a, b)).numpy()
    return float(s[0]) if np.ndim(w_a) == 2 else s


def similarity_from_embeddings(ea, eb, model: SimilarityModel) -> np.ndarray:
    """Score precomputed embeddings through the distance head alone."""
    with torch.no_grad():
        logit = model.head_logit(torch.as_tensor(np.asarray(ea), dtype=torch.float32),
                                 torch.as_tensor(np.asarray(eb), dtype=torch.float32))
        return torch.sigmoid(logit).numpy()


def anonymize(w, noise, model: Anonymizer) -> np.ndarray:
    x = _as_batch(w)
    n = np.asarray(noise, dtype=np.float32)
    if n.shape[-1] != model.cfg.noise_dim:
        raise InvalidInputError(f"noise must have length {model.cfg.noise_dim}")
    n = np.broadcast_to(n.reshape(-1, model.cfg.noise_dim), (x.shape[0], model.cfg.noise_dim)).copy()
    with torch.no_grad():
        y = model(x, torch.from_numpy(n)).numpy()
    return y[0] if np.ndim(w) == 2 else y


def normalize(w, model: Normalizer) -> np.ndarray:
    x = _as_batch(w)
    with torch.no_grad():
        y = model(x).numpy()
    return y[0] if np.ndim(w) == 2 else y


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_report(arch: ArchitectureConfig = ArchitectureConfig()) -> dict[str, int]:
    """Trainable parameters of the anonymization system (identifier excluded)."""
    report = {
        "action_similarity": count_parameters(SimilarityModel(arch.encoder)),
        "user_similarity": count_parameters(SimilarityModel(arch.encoder)),
        "anonymizer": count_parameters(Anonymizer(arch.anonymizer)),
        "normalizer": count_parameters(Normalizer(arch.normalizer)),
    }
    report["total"] = sum(report.values())
    return report
