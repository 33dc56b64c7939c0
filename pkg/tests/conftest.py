import numpy as np
import pytest

from regiontok.model import RenConfig, init_params
from regiontok.synth import SceneConfig, generate_scene, render_scene


@pytest.fixture(scope="session")
def tiny_config():
    return RenConfig(d_model=16, n_blocks=2, n_heads=4, encoder_dim=16)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(0, tiny_config)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(7, SceneConfig(n_regions=3, canvas=64, dim=16))


@pytest.fixture(scope="session")
def small_render(small_scene):
    return render_scene(small_scene, 8, 8, noise_sigma=0.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
