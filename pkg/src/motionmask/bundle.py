"""Versioned on-disk container for trained networks and statistics.

Layout (a zip archive, entries stored in a fixed order with fixed timestamps
so identical bundles are byte-identical):

``bundle.json``
    ``{"format": "motionmask-bundle", "version": 1, "architecture": {...},
    "components": [...], "stats": {...}, "identifier": {...} | null,
    "arrays": {name: {"shape": [...], "dtype": "<f4", "sha256": hex}}, "meta": {...}}``
``arrays/<component>/<parameter>.f32``
    raw row-major little-endian float32 bytes of one weight tensor.

Statistics (input z-score, population shift source/target) live in
``bundle.json`` as decimal float64 lists, which round-trip exactly.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import DimensionStats, FeatureSubset
from .dataset import atomic_write_bytes
from .models import (
    Anonymizer,
    ArchitectureConfig,
    EncoderConfig,
    Identifier,
    IdentifierModel,
    Normalizer,
    SimilarityModel,
    count_parameters,
)
from .training import ConfigurationError, PopulationShift

FORMAT = "motionmask-bundle"
FORMAT_VERSION = 1
COMPONENTS = ("action_sim", "user_sim", "anonymizer", "normalizer", "identifier")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class BundleError(Exception):
    pass


@dataclass
class ModelBundle:
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    input_stats: DimensionStats | None = None
    shift: PopulationShift | None = None
    action_sim: SimilarityModel | None = None
    user_sim: SimilarityModel | None = None
    anonymizer: Anonymizer | None = None
    normalizer: Normalizer | None = None
    identifier: IdentifierModel | None = None
    meta: dict = field(default_factory=dict)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(f"bundle is missing component(s): {', '.join(missing)}")

    def require_runtime(self) -> None:
        self.require("input_stats", "anonymizer", "normalizer")

    def modules(self) -> dict[str, nn.Module]:
        out = {}
        for name in COMPONENTS:
            m = getattr(self, name)
            if m is not None:
                out[name] = m.net if isinstance(m, IdentifierModel) else m
        return out

    def parameter_counts(self) -> dict[str, int]:
        return {k: count_parameters(m) for k, m in self.modules().items()}

    @classmethod
    def untrained(cls, arch: ArchitectureConfig = ArchitectureConfig(), seed: int = 0) -> "ModelBundle":
        """Randomly initialized runtime bundle with identity statistics (for tests and benchmarks)."""
        torch.manual_seed(seed)
        return cls(arch, DimensionStats.identity(), PopulationShift.identity(),
                   SimilarityModel(arch.encoder).eval(), SimilarityModel(arch.encoder).eval(),
                   Anonymizer(arch.anonymizer).eval(), Normalizer(arch.normalizer).eval())


def _stats_dict(s: DimensionStats | None):
    return None if s is None else s.to_dict()


def _stats_from(d) -> DimensionStats | None:
    return None if d is None else DimensionStats.from_dict(d)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    arrays, blobs = {}, []
    components = []
    for comp, module in bundle.modules().items():
        components.append(comp)
        for pname, tensor in module.state_dict().items():
            a = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            payload = np.ascontiguousarray(a).tobytes()
            name = f"{comp}/{pname}"
            arrays[name] = {"shape": list(a.shape), "dtype": "<f4",
                            "sha256": hashlib.sha256(payload).hexdigest()}
            blobs.append((f"arrays/{name}.f32", payload))
    ident = None
    if bundle.identifier is not None:
        idm = bundle.identifier
        ident = {
            "classes": list(idm.classes),
            "subset": {"name": idm.subset.name, "columns": list(idm.subset.columns)},
            "stats": _stats_dict(idm.stats),
            "encoder": dict(vars(idm.net.encoder.cfg)),
        }
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "architecture": bundle.arch.to_dict(),
        "components": components,
        "stats": {
            "input": _stats_dict(bundle.input_stats),
            "shift_source": _stats_dict(bundle.shift.source) if bundle.shift else None,
            "shift_target": _stats_dict(bundle.shift.target) if bundle.shift else None,
        },
        "identifier": ident,
        "arrays": arrays,
        "meta": bundle.meta,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "bundle.json", json.dumps(header, indent=1, sort_keys=True).encode("utf-8"))
        for name, payload in blobs:
            _zip_write(zf, name, payload)
    return buf.getvalue()


def save_bundle(bundle: ModelBundle, path) -> None:
    atomic_write_bytes(path, bundle_to_bytes(bundle))


def _load_state(zf: zipfile.ZipFile, header: dict, comp: str, module: nn.Module) -> None:
    state = {}
    for pname, ref in module.state_dict().items():
        name = f"{comp}/{pname}"
        info = header["arrays"].get(name)
        if info is None:
            raise BundleError(f"missing array {name}")
        payload = zf.read(f"arrays/{name}.f32")
        if hashlib.sha256(payload).hexdigest() != info["sha256"]:
            raise BundleError(f"checksum mismatch for {name}")
        shape = tuple(info["shape"])
        if shape != tuple(ref.shape):
            raise BundleError(f"shape mismatch for {name}: {shape} vs {tuple(ref.shape)}")
        a = np.frombuffer(payload, dtype="<f4").reshape(shape)
        state[pname] = torch.from_numpy(a.astype(np.float32))
    module.load_state_dict(state)
    module.eval()


def load_bundle(path) -> ModelBundle:
    """Read a bundle; any corruption or version mismatch raises ``BundleError``."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("bundle.json"))
            if header.get("format") != FORMAT:
                raise BundleError(f"{path} is not a {FORMAT} file")
            if header.get("version") != FORMAT_VERSION:
                raise BundleError(f"unsupported bundle version {header.get('version')} (expected {FORMAT_VERSION})")
            arch = ArchitectureConfig.from_dict(header["architecture"])
            comps = set(header["components"])
            stats = header["stats"]
            bundle = ModelBundle(arch, _stats_from(stats["input"]), None, meta=header.get("meta", {}))
            if stats.get("shift_source") is not None:
                bundle.shift = PopulationShift(_stats_from(stats["shift_source"]),
                                               _stats_from(stats["shift_target"]))
            builders = {
                "action_sim": lambda: SimilarityModel(arch.encoder),
                "user_sim": lambda: SimilarityModel(arch.encoder),
                "anonymizer": lambda: Anonymizer(arch.anonymizer),
                "normalizer": lambda: Normalizer(arch.normalizer),
            }
            for comp, build in builders.items():
                if comp in comps:
                    m = build()
                    _load_state(zf, header, comp, m)
                    setattr(bundle, comp, m)
            if "identifier" in comps:
                info = header["identifier"]
                enc = EncoderConfig(**info["encoder"])
                subset = FeatureSubset(info["subset"]["name"], tuple(info["subset"]["columns"]))
                net = Identifier(len(info["classes"]), enc, n_inputs=len(subset.columns))
                _load_state(zf, header, "identifier", net)
                bundle.identifier = IdentifierModel(net, _stats_from(info["stats"]), info["classes"], subset)
            return bundle
    except BundleError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, TypeError, OSError, RuntimeError, EOFError,
            json.JSONDecodeError) as exc:
        raise BundleError(f"cannot load bundle {path}: {exc}") from exc
