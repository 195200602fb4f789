import numpy as np
import pytest

from relpose.synth import SynthConfig, build_pairs, generate_scene


@pytest.fixture(scope="session")
def small_scene():
    cfg = SynthConfig(grid_h=4, grid_w=4, descriptor_dim=16, n_views=6, seed=3)
    views, landmarks = generate_scene(cfg)
    return cfg, views, landmarks, build_pairs(views)


@pytest.fixture(scope="session")
def clean_scene():
    cfg = SynthConfig(grid_h=6, grid_w=6, descriptor_dim=32, n_views=6, seed=11,
                      descriptor_noise_sigma=0.0, outlier_fraction=0.0)
    views, landmarks = generate_scene(cfg)
    return cfg, views, landmarks, build_pairs(views)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
