import numpy as np
import pytest

from deepembed.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SynthConfig(n_identities=10, faces_per_identity=3, n_patches=2, patch_dim=8,
                                within_noise_sigma=0.05, patch_noise_sigma=0.05, seed=3))


@pytest.fixture(scope="session")
def medium_dataset():
    return generate(SynthConfig(n_identities=30, faces_per_identity=6, n_patches=3, patch_dim=16,
                                within_noise_sigma=0.3, patch_noise_sigma=0.1, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
