import numpy as np
import pytest
from hypothesis import settings

from narrate3d.io.synthetic import SyntheticSceneConfig, generate_synthetic_scene

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    """Three-model chain, noise-free, 40% corrupted matches."""
    return generate_synthetic_scene(SyntheticSceneConfig(seed=7, n_models=3, outlier_fraction=0.4))


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory, small_scene):
    from narrate3d.io.synthetic import write_scene

    d = tmp_path_factory.mktemp("scene")
    write_scene(small_scene, d)
    return d
