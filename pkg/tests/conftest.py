import numpy as np
import pytest

from edgejudge.ingest import JOINTS, JumpSample, PoseSequence
from edgejudge.synth import SynthConfig, generate_dataset


def random_pose(rng, n_frames=30, fps=240.0):
    return PoseSequence(fps, rng.normal(0.0, 50.0, size=(n_frames, len(JOINTS), 3)))


def make_sample(sample_id, skater_id, label, frames, fps=240.0, source="camera", angles=None):
    return JumpSample(sample_id, skater_id, source, PoseSequence(fps, frames), label, angles)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(n_skaters=3, jumps_per_skater=8, seed=3, noise_sigma=1.0)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    dataset, _ = generate_dataset(small_config)
    return dataset


@pytest.fixture(scope="session")
def small_dataset_dir(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_small")
    _, manifest = generate_dataset(small_config, out)
    return manifest
