import sys

import numpy as np
import pytest
import torch

from motionmask.bundle import ModelBundle
from motionmask.core import DimensionStats, N_DIMS, quat_from_rotvec
from motionmask.dataset import prepare_windows
from motionmask.models import AnonymizerConfig, ArchitectureConfig, EncoderConfig, NormalizerConfig
from motionmask.synth import synth_generate
from motionmask.training import PopulationShift

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


def random_frames(rng, n):
    """``(n, 21)`` frames with random positions and random unit quaternions."""
    data = np.empty((n, N_DIMS))
    for d in range(3):
        data[:, d * 7:d * 7 + 3] = rng.normal(0, 0.5, (n, 3))
        data[:, d * 7 + 3:d * 7 + 7] = quat_from_rotvec(rng.normal(0, 1.0, (n, 3)))
    return data


def tiny_arch(hidden=8):
    return ArchitectureConfig(
        encoder=EncoderConfig(frame_state_dim=hidden, summary_dim=hidden, embedding_dim=hidden,
                              hidden_dense_dims=(hidden,)),
        anonymizer=AnonymizerConfig(noise_dim=4, conv_filters=6, hidden_dims=(12, 8)),
        normalizer=NormalizerConfig(state_dim=hidden))


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(4, 3, 6, seed=3, duration=31.0)


@pytest.fixture(scope="session")
def small_windows(small_corpus):
    return prepare_windows(small_corpus.manifest, small_corpus.sequences)


def perturbed_bundle(arch=None, seed=0):
    """Untrained bundle with non-trivial statistics and population shift."""
    arch = arch or ArchitectureConfig()
    b = ModelBundle.untrained(arch, seed=seed)
    rng = np.random.default_rng(seed)
    b.input_stats = DimensionStats(rng.normal(0, 0.2, N_DIMS), rng.uniform(0.1, 0.6, N_DIMS))
    b.shift = PopulationShift(DimensionStats(rng.normal(0, 0.1, N_DIMS), rng.uniform(0.5, 1.5, N_DIMS)),
                              DimensionStats(rng.normal(0, 0.1, N_DIMS), rng.uniform(0.5, 1.5, N_DIMS)))
    return b


@pytest.fixture(scope="session")
def default_bundle():
    return perturbed_bundle(seed=1)


@pytest.fixture
def tiny_bundle():
    return perturbed_bundle(tiny_arch(), seed=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
