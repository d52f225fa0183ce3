"""Shared fixtures: a small sensor rig and a tiny on-disk dataset."""

import numpy as np
import pytest

from cubefusion import SceneConfig, SensorRig
from cubefusion.dataset import generate_dataset
from cubefusion.radar import RadarCube


@pytest.fixture
def small_rig():
    return SensorRig(range_max=16.0, range_bins=32, azimuth_bins=16,
                     elevation_bins=8, doppler_bins=8,
                     image_height=96, image_width=160)


@pytest.fixture
def simple_scene_config():
    return SceneConfig(min_objects=1, max_objects=3, min_range=3.0,
                       max_range_fraction=0.8,
                       condition_weights={"normal": 1.0},
                       daytime_weights={"day": 1.0})


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    rig = SensorRig(range_max=16.0, range_bins=32, azimuth_bins=16,
                    elevation_bins=8, doppler_bins=8,
                    image_height=96, image_width=160)
    config = SceneConfig(min_objects=1, max_objects=3, min_range=3.0,
                         max_range_fraction=0.8,
                         condition_weights={"normal": 0.5, "rain": 0.5},
                         daytime_weights={"day": 0.75, "night": 0.25})
    generate_dataset(root, 4, seed=5, config=config, rig=rig)
    return root


def random_cube(rng, shape=(6, 5, 4, 3)):
    """A valid random radar cube with strictly increasing axes."""
    r, a, e, d = shape
    return RadarCube(
        power=rng.uniform(0.0, 5.0, shape),
        range_axis=np.sort(rng.uniform(0.5, 50.0, r)),
        azimuth_axis=np.sort(rng.uniform(-1.0, 1.0, a)),
        elevation_axis=np.sort(rng.uniform(-0.5, 0.5, e)),
        doppler_axis=np.sort(rng.uniform(-10.0, 10.0, d)),
    )
